use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::element::Element;
use crate::tensor::storage::Tensor;
use crate::tensor::tape::Var;

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax_tensor<E: Element>(x: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![E::ZERO; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = src[base];
            for j in 1..len {
                m = m.max(src[base + j * inner]);
            }
            let mut sum = E::ZERO;
            for j in 0..len {
                let e = (src[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            let inv = E::ONE / sum;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Per-row standardization: returns (x_hat, 1/std) for `rows` rows of `len`.
/// Statistics accumulate in f64.
fn standardize<E: Element>(x: &[E], len: usize, eps: f64) -> (Vec<E>, Vec<f64>) {
    let rows = x.len() / len;
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.chunks_exact(len) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / len as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        let is = 1.0 / (var + eps).sqrt();
        xhat.extend(row.iter().map(|v| E::from_f64((v.to_f64() - mean) * is)));
        inv_std.push(is);
    }
    (xhat, inv_std)
}

/// Input gradient of row standardization given d(x_hat).
fn standardize_backward<E: Element>(dxhat: &[E], xhat: &[E], inv_std: &[f64], len: usize) -> Vec<E> {
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((dr, xr), &is) in dxhat.chunks_exact(len).zip(xhat.chunks_exact(len)).zip(inv_std) {
        let n = len as f64;
        let mean_d = dr.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let mean_dx = dr.iter().zip(xr).map(|(d, x)| d.to_f64() * x.to_f64()).sum::<f64>() / n;
        dx.extend(
            dr.iter()
                .zip(xr)
                .map(|(d, x)| E::from_f64(is * (d.to_f64() - mean_d - x.to_f64() * mean_dx))),
        );
    }
    dx
}

/// Which element index picks the affine coefficient.
#[derive(Clone, Copy)]
enum AffineIndex {
    /// coefficient per position within the row (layer norm)
    Column { len: usize },
    /// coefficient per row modulo channel count (instance norm)
    Row { len: usize, channels: usize },
}

impl AffineIndex {
    #[inline]
    fn at(self, i: usize) -> usize {
        match self {
            AffineIndex::Column { len } => i % len,
            AffineIndex::Row { len, channels } => (i / len) % channels,
        }
    }
}

fn normalize_affine<'t, E: Element>(
    x: &Var<'t, E>,
    len: usize,
    gamma: Option<&Var<'t, E>>,
    beta: Option<&Var<'t, E>>,
    eps: f64,
    index: AffineIndex,
) -> Var<'t, E> {
    let (xhat, inv_std) = standardize(x.value().data(), len, eps);
    let shape = x.shape().to_vec();
    let xhat = Arc::new(Tensor::from_parts(shape.clone(), xhat));
    let out = if gamma.is_none() && beta.is_none() {
        xhat.clone()
    } else {
        let g = gamma.map(|g| g.value().data());
        let b = beta.map(|b| b.value().data());
        let data = xhat
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = index.at(i);
                let v = g.map_or(v, |g| v * g[c]);
                b.map_or(v, |b| v + b[c])
            })
            .collect();
        Arc::new(Tensor::from_parts(shape, data))
    };
    let tape = x.tape();
    let mut inputs = vec![x];
    inputs.extend(gamma);
    inputs.extend(beta);
    if !tape.needs_grad(&inputs) {
        return tape.constant_arc(out);
    }
    let gamma_v = gamma.map(|g| g.value_arc());
    let (has_g, has_b) = (gamma.is_some(), beta.is_some());
    let coeffs = gamma.map(|g| g.shape()[0]).or(beta.map(|b| b.shape()[0])).unwrap_or(0);
    tape.record_arc(out, &inputs, move |g, needs| {
        let gd = g.data();
        let mut grads = Vec::with_capacity(3);
        let gx = needs[0].then(|| {
            let dxhat: Vec<E> = match &gamma_v {
                Some(gm) => gd.iter().enumerate().map(|(i, &d)| d * gm.data()[index.at(i)]).collect(),
                None => gd.to_vec(),
            };
            Tensor::from_parts(
                g.shape().to_vec(),
                standardize_backward(&dxhat, xhat.data(), &inv_std, len),
            )
        });
        grads.push(gx);
        if has_g {
            grads.push(needs[1].then(|| {
                let mut acc = vec![0.0f64; coeffs];
                for (i, (&d, &xh)) in gd.iter().zip(xhat.data()).enumerate() {
                    acc[index.at(i)] += d.to_f64() * xh.to_f64();
                }
                Tensor::from_parts(vec![coeffs], acc.into_iter().map(E::from_f64).collect())
            }));
        }
        if has_b {
            let k = if has_g { 2 } else { 1 };
            grads.push(needs[k].then(|| {
                let mut acc = vec![0.0f64; coeffs];
                for (i, &d) in gd.iter().enumerate() {
                    acc[index.at(i)] += d.to_f64();
                }
                Tensor::from_parts(vec![coeffs], acc.into_iter().map(E::from_f64).collect())
            }));
        }
        grads
    })
}

fn check_affine<E: Element>(p: Option<&Var<'_, E>>, n: usize, what: &str) -> Result<()> {
    match p {
        Some(p) if p.shape() != [n] => Err(shape_err!("{what} shape {:?}, expected [{n}]", p.shape())),
        _ => Ok(()),
    }
}

impl<'t, E: Element> Var<'t, E> {
    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, E>> {
        if axis >= self.shape().len() {
            return Err(shape_err!("softmax axis {axis} for shape {:?}", self.shape()));
        }
        let out = Arc::new(softmax_tensor(self.value(), axis));
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant_arc(out));
        }
        let y = out.clone();
        Ok(tape.record_arc(out, &[self], move |g, _| {
            let (outer, len, inner) = split_axis(y.shape(), axis);
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![E::ZERO; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = E::ZERO;
                    for j in 0..len {
                        dot += yd[base + j * inner] * gd[base + j * inner];
                    }
                    for j in 0..len {
                        let k = base + j * inner;
                        gx[k] = yd[k] * (gd[k] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
        }))
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(
        &self,
        gamma: Option<&Var<'t, E>>,
        beta: Option<&Var<'t, E>>,
        eps: f64,
    ) -> Result<Var<'t, E>> {
        let len = *self.shape().last().expect("non-empty shape");
        check_affine(gamma, len, "layer_norm gamma")?;
        check_affine(beta, len, "layer_norm beta")?;
        Ok(normalize_affine(self, len, gamma, beta, eps, AffineIndex::Column { len }))
    }

    /// Instance normalization of `[N, C, spatial...]`: statistics per
    /// (instance, channel) over the spatial extents.
    pub fn instance_norm(
        &self,
        gamma: Option<&Var<'t, E>>,
        beta: Option<&Var<'t, E>>,
        eps: f64,
    ) -> Result<Var<'t, E>> {
        let shape = self.shape();
        if shape.len() != 5 {
            return Err(shape_err!("instance_norm expects [N, C, H, W, D], got {shape:?}"));
        }
        let channels = shape[1];
        let len: usize = shape[2..].iter().product();
        check_affine(gamma, channels, "instance_norm gamma")?;
        check_affine(beta, channels, "instance_norm beta")?;
        Ok(normalize_affine(self, len, gamma, beta, eps, AffineIndex::Row { len, channels }))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheckConfig};
    use crate::tensor::tape::Tape;

    fn weights(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![3]));
        for &v in x.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(Tensor::from_f64_slice(vec![2], &[1000.0, 0.0]).unwrap());
        let s = y.softmax(0).unwrap();
        assert!((s.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(s.value().data()[1].abs() < 1e-12);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let tape = Tape::<f32>::new();
        let x = Tensor::<f32>::from_fn(vec![4, 7, 3], |i| ((i * 37 % 11) as f32) - 5.0);
        for axis in 0..3 {
            let s = tape.constant(x.clone()).softmax(axis).unwrap();
            let shifted = tape.constant(x.map(|v| v + 12.5)).softmax(axis).unwrap();
            assert!(s.value().max_abs_diff(shifted.value()) < 1e-6);
            let (outer, len, inner) = split_axis(x.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let total: f32 = (0..len).map(|j| s.value().data()[o * len * inner + j * inner + i]).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn layer_norm_hand_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64_slice(vec![2], &[1.0, 3.0]).unwrap());
        assert_eq!(x.layer_norm(None, None, 0.0).unwrap().value().data(), &[-1.0, 1.0]);
        let c = tape.constant(Tensor::full(vec![2, 4], 3.5));
        let (g, b) = (tape.constant(Tensor::ones(vec![4])), tape.constant(Tensor::zeros(vec![4])));
        assert!(c.layer_norm(Some(&g), Some(&b), 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_hand_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64_slice(vec![1, 1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.instance_norm(None, None, 0.0).unwrap();
        let s = 1.25f64.sqrt();
        let expect = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (a, b) in y.value().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let c = tape.constant(Tensor::from_fn(vec![1, 2, 2, 2, 2], |i| if i < 8 { 4.0 } else { -1.0 }));
        assert!(c.instance_norm(None, None, 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
        assert!(tape.constant(Tensor::<f64>::zeros(vec![2, 2])).instance_norm(None, None, 1e-5).is_err());
    }

    #[test]
    fn norm_gradients() {
        let cfg = GradCheckConfig::default();
        for seed in 0..3 {
            let x = weights(&[5], seed);
            let e = finite_difference_check(&x, &cfg, |v| {
                let w = v.tape().constant(weights(&[5], 99));
                Ok(v.softmax(0)?.mul(&w)?.sum())
            })
            .unwrap();
            assert!(e < 1e-4, "softmax {e}");

            let x = weights(&[3, 6], seed + 10);
            let (g, b) = (weights(&[6], seed + 20), weights(&[6], seed + 30));
            let w = weights(&[3, 6], 7);
            let (g1, b1, w1) = (g.clone(), b.clone(), w.clone());
            let e = finite_difference_check(&x, &cfg, move |v| {
                let t = v.tape();
                let y = v.layer_norm(Some(&t.constant(g1.clone())), Some(&t.constant(b1.clone())), 1e-5)?;
                Ok(y.mul(&t.constant(w1.clone()))?.sum())
            })
            .unwrap();
            assert!(e < 1e-4, "layer_norm x {e}");
            let (x2, b2, w2) = (x.clone(), b.clone(), w.clone());
            let e = finite_difference_check(&g, &cfg, move |v| {
                let t = v.tape();
                let y = t.constant(x2.clone()).layer_norm(Some(v), Some(&t.constant(b2.clone())), 1e-5)?;
                Ok(y.mul(&t.constant(w2.clone()))?.sum())
            })
            .unwrap();
            assert!(e < 1e-4, "layer_norm gamma {e}");

            let x = weights(&[2, 3, 2, 2, 3], seed + 40);
            let (g, b) = (weights(&[3], seed + 50), weights(&[3], seed + 60));
            let w = weights(&[2, 3, 2, 2, 3], 8);
            let (g1, b1, w1) = (g.clone(), b.clone(), w.clone());
            let e = finite_difference_check(&x, &cfg, move |v| {
                let t = v.tape();
                let y = v.instance_norm(Some(&t.constant(g1.clone())), Some(&t.constant(b1.clone())), 1e-5)?;
                Ok(y.mul(&t.constant(w1.clone()))?.sum())
            })
            .unwrap();
            assert!(e < 1e-4, "instance_norm x {e}");
            let (x2, g2, w2) = (x.clone(), g.clone(), w.clone());
            let e = finite_difference_check(&b, &cfg, move |v| {
                let t = v.tape();
                let y = t.constant(x2.clone()).instance_norm(Some(&t.constant(g2.clone())), Some(v), 1e-5)?;
                Ok(y.mul(&t.constant(w2.clone()))?.mul(&y)?.sum())
            })
            .unwrap();
            assert!(e < 1e-4, "instance_norm beta {e}");
        }
    }
}
