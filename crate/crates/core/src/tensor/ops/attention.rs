//! Fused multi-head window attention.
//!
//! `softmax(scale * Q K^T + bias + mask) V` evaluated window by window and
//! head by head, so only one `T x T` score block is live at a time. The
//! backward pass recomputes the probabilities instead of storing them.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::element::{gemm, Element, MatLayout};
use crate::tensor::storage::Tensor;
use crate::tensor::tape::Var;

/// Additive penalty between tokens of different regions.
pub const MASK_PENALTY: f64 = -1e9;

/// Region labels per window position: tokens attend only to tokens with the
/// same label. Window `w` of a batch of `n * windows` uses row `w % windows`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub windows: usize,
    pub tokens: usize,
    pub labels: Arc<Vec<u32>>,
}

impl RegionMask {
    pub fn new(windows: usize, tokens: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != windows * tokens {
            return Err(shape_err!(
                "region mask has {} labels for {windows} windows of {tokens} tokens",
                labels.len()
            ));
        }
        Ok(RegionMask {
            windows,
            tokens,
            labels: Arc::new(labels),
        })
    }

    /// True when every window holds a single region.
    pub fn is_trivial(&self) -> bool {
        self.labels
            .chunks_exact(self.tokens)
            .all(|w| w.iter().all(|&l| l == w[0]))
    }

    /// Dense additive mask `[windows, T, T]` with 0 inside a region.
    pub fn dense<E: Element>(&self) -> Tensor<E> {
        let t = self.tokens;
        let pen = E::from_f64(MASK_PENALTY);
        Tensor::from_fn(vec![self.windows, t, t], |i| {
            let (w, r, c) = (i / (t * t), (i / t) % t, i % t);
            let lab = &self.labels[w * t..(w + 1) * t];
            if lab[r] == lab[c] {
                E::ZERO
            } else {
                pen
            }
        })
    }

    fn row(&self, batch_index: usize) -> &[u32] {
        let w = batch_index % self.windows;
        &self.labels[w * self.tokens..(w + 1) * self.tokens]
    }
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    t: usize,
    c: usize,
    heads: usize,
    hd: usize,
    scale: f64,
}

impl Dims {
    fn q(&self, b: usize, h: usize) -> MatLayout {
        MatLayout::strided(b * self.t * 3 * self.c + h * self.hd, 3 * self.c, 1)
    }
    fn k(&self, b: usize, h: usize) -> MatLayout {
        MatLayout::strided(b * self.t * 3 * self.c + self.c + h * self.hd, 3 * self.c, 1)
    }
    fn v(&self, b: usize, h: usize) -> MatLayout {
        MatLayout::strided(b * self.t * 3 * self.c + 2 * self.c + h * self.hd, 3 * self.c, 1)
    }
    fn kt(&self, b: usize, h: usize) -> MatLayout {
        let k = self.k(b, h);
        MatLayout { offset: k.offset, rs: k.cs, cs: k.rs }
    }
    fn o(&self, b: usize, h: usize) -> MatLayout {
        MatLayout::strided(b * self.t * self.c + h * self.hd, self.c, 1)
    }
}

/// Probabilities for window `b`, head `h` into `p` (`T x T`).
fn probs<E: Element>(d: &Dims, qkv: &[E], bias: &[E], mask: Option<&RegionMask>, b: usize, h: usize, p: &mut [E]) {
    let t = d.t;
    gemm(t, d.hd, t, E::from_f64(d.scale), qkv, d.q(b, h), qkv, d.kt(b, h), E::ZERO, p,
        MatLayout::row_major(0, t));
    let bh = &bias[h * t * t..(h + 1) * t * t];
    let pen = E::from_f64(MASK_PENALTY);
    let labels = mask.map(|m| m.row(b));
    for r in 0..t {
        let row = &mut p[r * t..(r + 1) * t];
        for (c, v) in row.iter_mut().enumerate() {
            *v += bh[r * t + c];
            if let Some(l) = labels {
                if l[r] != l[c] {
                    *v += pen;
                }
            }
        }
        let mut m = row[0];
        for &v in row.iter() {
            m = m.max(v);
        }
        let mut s = E::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = E::ONE / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<'t, E: Element> Var<'t, E> {
    /// Multi-head attention inside windows. `self` is `[B, T, 3C]` packed as
    /// `(q | k | v)` with heads contiguous inside each part; `bias` is
    /// `[heads, T, T]`. Returns `[B, T, C]`.
    pub fn window_attention(
        &self,
        bias: &Var<'t, E>,
        heads: usize,
        mask: Option<&RegionMask>,
    ) -> Result<Var<'t, E>> {
        let s = self.shape();
        if s.len() != 3 || s[2] % 3 != 0 || heads == 0 || (s[2] / 3) % heads != 0 {
            return Err(shape_err!("window attention input {s:?} not [B, T, 3C] with C divisible by {heads} heads"));
        }
        let (b, t, c) = (s[0], s[1], s[2] / 3);
        if bias.shape() != [heads, t, t] {
            return Err(shape_err!("attention bias {:?}, expected [{heads}, {t}, {t}]", bias.shape()));
        }
        if let Some(m) = mask {
            if m.tokens != t || m.windows == 0 || b % m.windows != 0 {
                return Err(shape_err!(
                    "mask of {} windows x {} tokens does not fit batch {b} x {t}",
                    m.windows, m.tokens
                ));
            }
        }
        let hd = c / heads;
        let d = Dims { b, t, c, heads, hd, scale: (hd as f64).powf(-0.5) };
        let (qkv, bv) = (self.value_arc(), bias.value_arc());
        let mut out = vec![E::ZERO; b * t * c];
        let mut p = vec![E::ZERO; t * t];
        for bi in 0..b {
            for h in 0..heads {
                probs(&d, qkv.data(), bv.data(), mask, bi, h, &mut p);
                gemm(t, t, hd, E::ONE, &p, MatLayout::row_major(0, t), qkv.data(), d.v(bi, h),
                    E::ZERO, &mut out, d.o(bi, h));
            }
        }
        let out = Tensor::from_parts(vec![b, t, c], out);
        let tape = self.tape();
        if !tape.needs_grad(&[self, bias]) {
            return Ok(tape.constant(out));
        }
        let mask = mask.cloned();
        Ok(tape.record(out, &[self, bias], move |g, needs| {
            let (q, bd, gd) = (qkv.data(), bv.data(), g.data());
            let mut dqkv = vec![E::ZERO; q.len()];
            let mut dbias = vec![E::ZERO; bd.len()];
            let (mut p, mut dp) = (vec![E::ZERO; t * t], vec![E::ZERO; t * t]);
            let sc = E::from_f64(d.scale);
            let tt = MatLayout::row_major(0, t);
            for bi in 0..d.b {
                for h in 0..d.heads {
                    probs(&d, q, bd, mask.as_ref(), bi, h, &mut p);
                    // dV = P^T dO
                    gemm(t, t, hd, E::ONE, &p, MatLayout::transposed(0, t), gd, d.o(bi, h),
                        E::ZERO, &mut dqkv, d.v(bi, h));
                    // dP = dO V^T
                    let v = d.v(bi, h);
                    gemm(t, hd, t, E::ONE, gd, d.o(bi, h), q, MatLayout { offset: v.offset, rs: v.cs, cs: v.rs },
                        E::ZERO, &mut dp, tt);
                    for r in 0..t {
                        let (pr, dr) = (&p[r * t..(r + 1) * t], &mut dp[r * t..(r + 1) * t]);
                        let dot = pr.iter().zip(dr.iter()).fold(E::ZERO, |a, (&x, &y)| a + x * y);
                        for (dv, &pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot);
                        }
                    }
                    let db = &mut dbias[h * t * t..(h + 1) * t * t];
                    db.iter_mut().zip(&dp).for_each(|(a, &v)| *a += v);
                    // dQ = scale dS K, dK = scale dS^T Q
                    gemm(t, t, hd, sc, &dp, tt, q, d.k(bi, h), E::ZERO, &mut dqkv, d.q(bi, h));
                    gemm(t, t, hd, sc, &dp, MatLayout::transposed(0, t), q, d.q(bi, h), E::ZERO,
                        &mut dqkv, d.k(bi, h));
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(qkv.shape().to_vec(), dqkv)),
                needs[1].then(|| Tensor::from_parts(bv.shape().to_vec(), dbias)),
            ]
        }))
    }
}
