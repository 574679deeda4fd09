use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Adaptive moments with decoupled weight decay. Moments are kept in f64
/// and indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<E: Element>(config: AdamWConfig, params: &ParamStore<E>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value().numel()]).collect();
        AdamW { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. `grads[i]` belongs to the i-th parameter; `None` means
    /// the parameter did not take part in the loss (decay still applies).
    pub fn update<E: Element>(&mut self, params: &mut ParamStore<E>, grads: &[Option<Tensor<E>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value().shape() {
                    return Err(Error::Shape(format!("gradient of {} has shape {:?}", p.name(), g.shape())));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", p.name())));
                }
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.value_mut().data_mut();
            for j in 0..data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j].to_f64());
                let mut w = data[j].to_f64() * decay;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                data[j] = E::from_f64(w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Parameter;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(Parameter::new("w", Tensor::from_f64_slice(vec![values.len()], values).unwrap())).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[1.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &[Some(Tensor::from_f64_slice(vec![1], &[1.0]).unwrap())], 0.1).unwrap();
        let w = p.by_name("w").unwrap().value().data()[0];
        assert!((w - 0.9).abs() < 1e-8, "{w}");
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = store(&[1.5, -2.0, 0.25]);
        let before = p.by_name("w").unwrap().value().clone();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        for _ in 0..5 {
            opt.update(&mut p, &[Some(Tensor::zeros(vec![3]))], 0.01).unwrap();
        }
        assert_eq!(p.by_name("w").unwrap().value(), &before);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = store(&[2.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, &p);
        opt.update(&mut p, &[None], 0.1).unwrap();
        assert_eq!(p.by_name("w").unwrap().value().data()[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let err = opt.update(&mut p, &[Some(Tensor::from_f64_slice(vec![1], &[f64::NAN]).unwrap())], 0.1).unwrap_err();
        assert!(err.is_numerical() && err.to_string().contains("w"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn deterministic() {
        use rand::Rng;
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = store(&[0.3, -0.7]);
            let mut opt = AdamW::new(AdamWConfig::default(), &p);
            for _ in 0..10 {
                let g: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                opt.update(&mut p, &[Some(Tensor::from_f64_slice(vec![2], &g).unwrap())], 1e-3).unwrap();
            }
            p.by_name("w").unwrap().value().clone()
        };
        assert_eq!(run(), run());
    }
}
