//! Central-difference gradient checking.

use std::cell::RefCell;
use std::sync::Arc;

use super::element::Element;
use super::storage::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation step.
    pub eps: f64,
    /// Flat indices to probe; `None` checks every coordinate.
    pub coords: Option<Vec<usize>>,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            coords: None,
            floor: 1e-8,
        }
    }
}

enum Branches {
    Record(Vec<Arc<Vec<bool>>>),
    Replay { log: Vec<Arc<Vec<bool>>>, next: usize, diverged: bool },
}

thread_local! {
    static BRANCHES: RefCell<Option<Branches>> = const { RefCell::new(None) };
}

/// Branch selection for piecewise-linear activations. Returns `None`
/// outside [`record_branches`] / [`replay_branches`]; inside them the
/// activation is evaluated as a constant, so only no-grad tapes belong there.
pub(crate) fn branch_hook<E: Element>(x: &Tensor<E>) -> Option<Arc<Vec<bool>>> {
    BRANCHES.with(|b| match b.borrow_mut().as_mut()? {
        Branches::Record(log) => {
            let m = Arc::new(x.data().iter().map(|&v| v >= E::ZERO).collect::<Vec<_>>());
            log.push(m.clone());
            Some(m)
        }
        Branches::Replay { log, next, diverged } => match log.get(*next) {
            Some(m) if m.len() == x.numel() => {
                *next += 1;
                Some(m.clone())
            }
            _ => {
                *diverged = true;
                None
            }
        },
    })
}

/// Runs `f` (without gradients) and records which side of its kink every
/// piecewise-linear activation fell on.
pub fn record_branches<T>(f: impl FnOnce() -> T) -> (T, Vec<Arc<Vec<bool>>>) {
    BRANCHES.with(|b| *b.borrow_mut() = Some(Branches::Record(Vec::new())));
    let out = f();
    let log = match BRANCHES.with(|b| b.borrow_mut().take()) {
        Some(Branches::Record(log)) => log,
        _ => Vec::new(),
    };
    (out, log)
}

/// Runs `f` with every piecewise-linear activation held on the branch
/// recorded by [`record_branches`]. Near the recorded point this is the
/// same function, minus the kinks a finite-difference stencil would cross.
pub fn replay_branches<T>(log: &[Arc<Vec<bool>>], f: impl FnOnce() -> T) -> Result<T> {
    BRANCHES.with(|b| *b.borrow_mut() = Some(Branches::Replay { log: log.to_vec(), next: 0, diverged: false }));
    let out = f();
    match BRANCHES.with(|b| b.borrow_mut().take()) {
        Some(Branches::Replay { next, diverged: false, .. }) if next == log.len() => Ok(out),
        _ => Err(Error::Autodiff("replayed evaluation took a different sequence of activations".into())),
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<E, F>(x: &Tensor<E>, f: &F) -> Result<f64>
where
    E: Element,
    F: for<'a> Fn(&Var<'a, E>) -> Result<Var<'a, E>>,
{
    let tape = Tape::no_grad();
    let out = f(&tape.constant(x.clone()))?;
    if out.value().numel() != 1 {
        return Err(Error::Autodiff(format!(
            "gradient check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.value().item().to_f64())
}

/// Analytic gradients of `f` at `x` per tape.
pub fn analytic_gradient<E, F>(x: &Tensor<E>, f: &F) -> Result<Tensor<E>>
where
    E: Element,
    F: for<'a> Fn(&Var<'a, E>) -> Result<Var<'a, E>>,
{
    let tape = Tape::new();
    let v = tape.variable(x.clone());
    let out = f(&v)?;
    tape.backward(&out)?;
    tape.grad(&v)
        .ok_or_else(|| Error::Autodiff("no gradient recorded for the input".into()))
}

/// Compares tape gradients of the scalar function `f` against central
/// differences and returns the largest relative error over the probed
/// coordinates.
pub fn finite_difference_check<E, F>(x: &Tensor<E>, cfg: &GradCheckConfig, f: F) -> Result<f64>
where
    E: Element,
    F: for<'a> Fn(&Var<'a, E>) -> Result<Var<'a, E>>,
{
    let base = eval(x, &f)?;
    if eval(x, &f)?.to_bits() != base.to_bits() {
        return Err(Error::Autodiff(
            "function is not deterministic; finite differences are meaningless".into(),
        ));
    }
    let grad = analytic_gradient(x, &f)?;
    let all: Vec<usize>;
    let coords = match &cfg.coords {
        Some(c) => c.as_slice(),
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::InvalidArgument(format!(
                "gradient check coordinate {i} out of range for {} elements",
                x.numel()
            )));
        }
        let orig = x.data()[i];
        probe.data_mut()[i] = E::from_f64(orig.to_f64() + cfg.eps);
        let up = eval(&probe, &f)?;
        probe.data_mut()[i] = E::from_f64(orig.to_f64() - cfg.eps);
        let down = eval(&probe, &f)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.eps);
        worst = worst.max(relative_error(grad.data()[i].to_f64(), numeric, cfg.floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_passes() {
        let x = Tensor::<f64>::from_f64_slice(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let err = finite_difference_check(&x, &GradCheckConfig::default(), |v| {
            Ok(v.mul(v)?.mul(v)?.sum())
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // detach hides the dependence from the tape, so the analytic gradient is zero
        let x = Tensor::<f64>::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap();
        let err = finite_difference_check(&x, &GradCheckConfig::default(), |v| {
            Ok(v.detach().mul(v)?.sum())
        })
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn frozen_branches_remove_the_kink() {
        let x = Tensor::<f64>::from_f64_slice(vec![2], &[-1e-7, 2.0]).unwrap();
        let f = |t: &Tape<f64>, x: &Tensor<f64>| t.constant(x.clone()).leaky_relu(0.01).sum().value().item();
        let eps = 1e-6;
        let probe = |d: f64| Tensor::<f64>::from_f64_slice(vec![2], &[-1e-7 + d, 2.0]).unwrap();
        let tape = Tape::no_grad();
        let free = (f(&tape, &probe(eps)) - f(&tape, &probe(-eps))) / (2.0 * eps);
        assert!((free - 0.01).abs() > 0.1);
        let (_, log) = record_branches(|| f(&tape, &x));
        let up = replay_branches(&log, || f(&tape, &probe(eps))).unwrap();
        let down = replay_branches(&log, || f(&tape, &probe(-eps))).unwrap();
        assert!(((up - down) / (2.0 * eps) - 0.01).abs() < 1e-9);
        assert!(replay_branches(&log, || f(&tape, &Tensor::ones(vec![3]))).is_err());
        assert!(branch_hook(&x).is_none());
    }

    #[test]
    fn non_scalar_rejected() {
        let x = Tensor::<f64>::ones(vec![2]);
        assert!(finite_difference_check(&x, &GradCheckConfig::default(), |v| Ok(v.clone())).is_err());
    }
}
