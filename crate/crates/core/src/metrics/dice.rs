use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;

/// Per (sample, class) sums `(sum G*Y, sum G^2 + sum Y^2)` for `[N, J, ...]`.
fn class_sums<E: Element>(y: &[E], g: &[E], groups: usize) -> Vec<(f64, f64)> {
    let len = y.len() / groups;
    (0..groups)
        .map(|k| {
            let (ys, gs) = (&y[k * len..(k + 1) * len], &g[k * len..(k + 1) * len]);
            let mut inter = 0.0;
            let mut denom = 0.0;
            for (&a, &b) in ys.iter().zip(gs) {
                let (a, b) = (a.to_f64(), b.to_f64());
                inter += a * b;
                denom += a * a + b * b;
            }
            (inter, denom)
        })
        .collect()
}

impl<'t, E: Element> Var<'t, E> {
    /// Soft Dice loss of probabilities `self` against a one-hot target of the
    /// same shape `[N, J, spatial...]`:
    /// `1 - mean_{n,j} (2 sum GY + eps) / (sum G^2 + sum Y^2 + eps)`.
    pub fn soft_dice_loss(&self, target: &Tensor<E>, eps: f64) -> Result<Var<'t, E>> {
        let s = self.shape();
        if s != target.shape() {
            return Err(shape_err!("dice: prediction {s:?} vs target {:?}", target.shape()));
        }
        if s.len() < 2 {
            return Err(shape_err!("dice needs [N, J, ...], got {s:?}"));
        }
        let groups = s[0] * s[1];
        let sums = class_sums(self.value().data(), target.data(), groups);
        let mean_ratio = sums.iter().map(|&(i, d)| (2.0 * i + eps) / (d + eps)).sum::<f64>() / groups as f64;
        let out = Tensor::scalar(E::from_f64(1.0 - mean_ratio));
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant(out));
        }
        let (y, g) = (self.value_arc(), target.clone());
        Ok(tape.record(out, &[self], move |up, _| {
            let up = up.item().to_f64();
            let len = y.numel() / groups;
            let mut grad = Vec::with_capacity(y.numel());
            for (k, &(i, d)) in sums.iter().enumerate() {
                let den = d + eps;
                let num = 2.0 * i + eps;
                let c = -up / groups as f64;
                for (&yv, &gv) in y.data()[k * len..(k + 1) * len].iter().zip(&g.data()[k * len..(k + 1) * len]) {
                    let (yv, gv) = (yv.to_f64(), gv.to_f64());
                    grad.push(E::from_f64(c * (2.0 * gv / den - num * 2.0 * yv / (den * den))));
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), grad).expect("same shape"))]
        }))
    }
}

/// `2|P & G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err!("dice_score: {} vs {} voxels", pred.len(), gt.len()));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}
