//! Invariant suites shared by the test harness and the `verify` command.

mod grad;
mod oracles;
pub mod reference;
mod roundtrip;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SwinUnetr;
use crate::tensor::{Element, Tensor};

pub use grad::{model_gradcheck, model_gradcheck_with, op_gradchecks, MODEL_TOL_F32, MODEL_TOL_F64, OP_TOL};
pub use oracles::{
    dice_checks, ensemble_checks, hausdorff_checks, param_count_check, schedule_checks, shift_mask_checks, sliding_window_checks,
    swmsa_oracle, wmsa_oracle, ORACLE_TOL,
};
pub use roundtrip::roundtrip_checks;

/// Replaces every parameter with N(0, std) draws; layer-norm gains are
/// centred on one instead of zero.
pub fn randomize_params<E: Element, R: Rng + ?Sized>(model: &mut SwinUnetr<E>, std: f64, rng: &mut R) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for p in model.params_mut().iter_mut() {
        let gain = p.name().contains("norm") && p.name().ends_with(".weight");
        let shape = p.value().shape().to_vec();
        let t = Tensor::from_fn(shape, |_| E::from_f64(normal.sample(rng) + if gain { 1.0 } else { 0.0 }));
        p.set_value(t).expect("same shape");
    }
}

/// Sets every parameter to zero.
pub fn zero_params<E: Element>(model: &mut SwinUnetr<E>) {
    for p in model.params_mut().iter_mut() {
        let shape = p.value().shape().to_vec();
        p.set_value(Tensor::zeros(shape)).expect("same shape");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracles,
    Roundtrip,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "oracles" => Ok(Suite::Oracles),
            "roundtrip" => Ok(Suite::Roundtrip),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidArgument(format!("unknown suite {s:?} (gradcheck, oracles, roundtrip, all)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Oracles => "oracles",
            Suite::Roundtrip => "roundtrip",
            Suite::All => "all",
        })
    }
}

/// Deliberate defects, used to show that a suite can fail.
#[derive(Clone, Debug, Default)]
pub struct Faults {
    /// Replace every non-zero shift of the shifted-window oracle cases.
    pub swmsa_shift: Option<usize>,
}

/// Outcome of one named invariant. `value` is the measured error (or 0/1
/// for boolean checks), compared against `tolerance`.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    /// Passes when `value < tol`; errors fail with their message.
    pub fn below(suite: &str, name: impl Into<String>, value: Result<f64>, tol: f64) -> Self {
        match value {
            Ok(v) => CheckResult {
                suite: suite.into(),
                name: name.into(),
                passed: v < tol,
                value: v,
                tolerance: tol,
                detail: String::new(),
            },
            Err(e) => Self::error(suite, name, e),
        }
    }

    /// Passes when `value <= tol` (0 for bit-exact checks).
    pub fn at_most(suite: &str, name: impl Into<String>, value: Result<f64>, tol: f64) -> Self {
        let mut r = Self::below(suite, name, value, f64::INFINITY);
        if r.detail.is_empty() {
            r.passed = r.value <= tol;
            r.tolerance = tol;
        }
        r
    }

    pub fn flag(suite: &str, name: impl Into<String>, ok: Result<bool>) -> Self {
        Self::at_most(suite, name, ok.map(|b| if b { 0.0 } else { 1.0 }), 0.0)
    }

    fn error(suite: &str, name: impl Into<String>, e: Error) -> Self {
        CheckResult {
            suite: suite.into(),
            name: name.into(),
            passed: false,
            value: f64::NAN,
            tolerance: f64::NAN,
            detail: e.to_string(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        if self.detail.is_empty() {
            self.detail = detail.into();
        }
        self
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {}/{} value={:.3e} tol={:.1e}", self.suite, self.name, self.value, self.tolerance)?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Runs the selected suites in order gradcheck, oracles, roundtrip.
pub fn run(suite: Suite, faults: &Faults) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        out.extend(op_gradchecks());
        out.push(model_gradcheck::<f64>(MODEL_TOL_F64));
        out.push(model_gradcheck::<f32>(MODEL_TOL_F32));
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        out.extend(wmsa_oracle(20));
        out.extend(swmsa_oracle(faults));
        out.extend(shift_mask_checks());
        out.extend(dice_checks());
        out.extend(hausdorff_checks());
        out.extend(sliding_window_checks());
        out.extend(ensemble_checks());
        out.extend(schedule_checks());
        out.push(param_count_check());
    }
    if matches!(suite, Suite::Roundtrip | Suite::All) {
        out.extend(roundtrip_checks());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_all(results: &[CheckResult]) {
        let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn op_gradients_pass() {
        let r = op_gradchecks();
        assert!(r.len() > 40);
        assert_all(&r);
    }

    #[test]
    fn tiny_model_gradients_pass() {
        for r in [model_gradcheck::<f64>(MODEL_TOL_F64), model_gradcheck::<f32>(MODEL_TOL_F32)] {
            eprintln!("{r}");
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn oracle_and_roundtrip_suites_pass() {
        assert_all(&run(Suite::Oracles, &Faults::default()));
        assert_all(&run(Suite::Roundtrip, &Faults::default()));
    }

    #[test]
    fn injected_shift_fails_by_name() {
        let r = swmsa_oracle(&Faults { swmsa_shift: Some(1) });
        let failed: Vec<&str> = r.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"swmsa_gather_7x7x7_m7"), "{failed:?}");
    }

    #[test]
    fn suite_names_parse() {
        for s in ["gradcheck", "oracles", "roundtrip", "all"] {
            assert_eq!(s.parse::<Suite>().unwrap().to_string(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }
}
