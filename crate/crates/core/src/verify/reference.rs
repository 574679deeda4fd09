//! Plain-loop f64 implementations used as oracles for the windowed kernels.

use crate::error::{shape_err, Error, Result};
use crate::model::{block_prefix, SwinUnetr, NORM_EPS};
use crate::tensor::Tensor;
use crate::windowing::WindowConfig;

fn param<'a>(model: &'a SwinUnetr<f64>, name: &str) -> Result<&'a [f64]> {
    model
        .params()
        .by_name(name)
        .map(|p| p.value().data())
        .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
}

/// `y = W x + b` with `W` stored `[out, in]`.
fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let din = x.len();
    w.chunks_exact(din)
        .enumerate()
        .map(|(o, row)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.map_or(0.0, |b| b[o]))
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

struct Block<'a> {
    heads: usize,
    m: usize,
    qkv_w: &'a [f64],
    qkv_b: &'a [f64],
    proj_w: &'a [f64],
    proj_b: &'a [f64],
    table: Option<&'a [f64]>,
}

impl<'a> Block<'a> {
    fn load(model: &'a SwinUnetr<f64>, stage: usize, block: usize) -> Result<Self> {
        let p = block_prefix(stage, block);
        let cfg = model.config();
        Ok(Block {
            heads: cfg.heads[stage],
            m: cfg.window_size,
            qkv_w: param(model, &format!("{p}.attn.qkv.weight"))?,
            qkv_b: param(model, &format!("{p}.attn.qkv.bias"))?,
            proj_w: param(model, &format!("{p}.attn.proj.weight"))?,
            proj_b: param(model, &format!("{p}.attn.proj.bias"))?,
            table: if cfg.use_relative_position_bias {
                Some(param(model, &format!("{p}.attn.relative_position_bias"))?)
            } else {
                None
            },
        })
    }

    fn bias(&self, head: usize, a: [usize; 3], b: [usize; 3]) -> f64 {
        let Some(table) = self.table else { return 0.0 };
        let side = 2 * self.m - 1;
        let r = |i: usize| (a[i] as isize - b[i] as isize + self.m as isize - 1) as usize;
        table[((r(0) * side + r(1)) * side + r(2)) * self.heads + head]
    }

    /// Multi-head attention of `tokens` (features, positions) among
    /// themselves, followed by the output projection.
    fn attend(&self, feats: &[&[f64]], pos: &[[usize; 3]]) -> Vec<Vec<f64>> {
        let c = feats[0].len();
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qkv: Vec<Vec<f64>> = feats.iter().map(|f| affine(self.qkv_w, Some(self.qkv_b), f)).collect();
        let mut out = vec![vec![0.0; c]; feats.len()];
        for h in 0..self.heads {
            let r = h * d..(h + 1) * d;
            for i in 0..feats.len() {
                let q = &qkv[i][r.clone()];
                let logits: Vec<f64> = (0..feats.len())
                    .map(|j| {
                        let k = &qkv[j][c + r.start..c + r.end];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale + self.bias(h, pos[i], pos[j])
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    let v = &qkv[j][2 * c + r.start..2 * c + r.end];
                    for (o, vv) in out[i][r.clone()].iter_mut().zip(v) {
                        *o += ej / z * vv;
                    }
                }
            }
        }
        out.iter().map(|o| affine(self.proj_w, Some(self.proj_b), o)).collect()
    }
}

fn grid_of(z: &Tensor<f64>) -> Result<(usize, [usize; 3], usize)> {
    let s = z.shape();
    if s.len() != 5 {
        return Err(shape_err!("expected [B, H, W, D, C], got {s:?}"));
    }
    Ok((s[0], [s[1], s[2], s[3]], s[4]))
}

/// Full self-attention over every token of each batch item (no windows, no
/// relative bias), on an already normalized grid.
pub fn dense_attention(model: &SwinUnetr<f64>, stage: usize, block: usize, h: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (b, grid, c) = grid_of(h)?;
    let blk = Block { table: None, ..Block::load(model, stage, block)? };
    let n: usize = grid.iter().product();
    let mut out = Vec::with_capacity(b * n * c);
    for item in h.data().chunks_exact(n * c) {
        let feats: Vec<&[f64]> = item.chunks_exact(c).collect();
        out.extend(blk.attend(&feats, &vec![[0; 3]; n]).into_iter().flatten());
    }
    Tensor::new(h.shape().to_vec(), out)
}

/// Shifted-window attention branch computed by gathering, for every window
/// of the shifted partition, the tokens it covers on the unshifted torus,
/// and attending separately within groups of tokens that are neighbours in
/// the unwrapped grid (same wrap pattern, same real/pad status).
pub fn gathered_window_attention(model: &SwinUnetr<f64>, stage: usize, block: usize, h: &Tensor<f64>, wc: &WindowConfig) -> Result<Tensor<f64>> {
    let (b, grid, c) = grid_of(h)?;
    if grid != wc.grid {
        return Err(shape_err!("grid {grid:?} does not match window config {:?}", wc.grid));
    }
    let blk = Block::load(model, stage, block)?;
    let (p, win, s) = (wc.padded, wc.window, wc.shift);
    let n: usize = grid.iter().product();
    let zeros = vec![0.0; c];
    let mut out = vec![0.0; b * n * c];
    for bi in 0..b {
        let item = &h.data()[bi * n * c..(bi + 1) * n * c];
        for w0 in (0..p[0]).step_by(win[0]) {
            for w1 in (0..p[1]).step_by(win[1]) {
                for w2 in (0..p[2]).step_by(win[2]) {
                    // Unwrapped positions covered by this window, in [s, P + s).
                    let mut groups: std::collections::BTreeMap<([bool; 3], bool), Vec<[usize; 3]>> = Default::default();
                    for l0 in 0..win[0] {
                        for l1 in 0..win[1] {
                            for l2 in 0..win[2] {
                                let u = [w0 + l0 + s[0], w1 + l1 + s[1], w2 + l2 + s[2]];
                                let wrapped = [u[0] >= p[0], u[1] >= p[1], u[2] >= p[2]];
                                let orig = [u[0] % p[0], u[1] % p[1], u[2] % p[2]];
                                let pad = (0..3).any(|a| orig[a] >= grid[a]);
                                groups.entry((wrapped, pad)).or_default().push(orig);
                            }
                        }
                    }
                    for (_, members) in groups {
                        let feats: Vec<&[f64]> = members
                            .iter()
                            .map(|o| {
                                if (0..3).all(|a| o[a] < grid[a]) {
                                    let i = (o[0] * grid[1] + o[1]) * grid[2] + o[2];
                                    &item[i * c..(i + 1) * c]
                                } else {
                                    zeros.as_slice()
                                }
                            })
                            .collect();
                        for (o, y) in members.iter().zip(blk.attend(&feats, &members)) {
                            if (0..3).all(|a| o[a] < grid[a]) {
                                let i = bi * n + (o[0] * grid[1] + o[1]) * grid[2] + o[2];
                                out[i * c..(i + 1) * c].copy_from_slice(&y);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(h.shape().to_vec(), out)
}

/// Whole transformer block: LN, gathered window attention, residual, LN,
/// MLP, residual.
pub fn swin_block(model: &SwinUnetr<f64>, stage: usize, block: usize, z: &Tensor<f64>, wc: &WindowConfig) -> Result<Tensor<f64>> {
    let (_, _, c) = grid_of(z)?;
    let pre = block_prefix(stage, block);
    let g1 = param(model, &format!("{pre}.norm1.weight"))?;
    let b1 = param(model, &format!("{pre}.norm1.bias"))?;
    let g2 = param(model, &format!("{pre}.norm2.weight"))?;
    let b2 = param(model, &format!("{pre}.norm2.bias"))?;
    let fc1 = (param(model, &format!("{pre}.mlp.fc1.weight"))?, param(model, &format!("{pre}.mlp.fc1.bias"))?);
    let fc2 = (param(model, &format!("{pre}.mlp.fc2.weight"))?, param(model, &format!("{pre}.mlp.fc2.bias"))?);
    let h: Vec<f64> = z.data().chunks_exact(c).flat_map(|t| layer_norm(t, g1, b1)).collect();
    let a = gathered_window_attention(model, stage, block, &Tensor::new(z.shape().to_vec(), h)?, wc)?;
    let mut out = Vec::with_capacity(z.numel());
    for (t, at) in z.data().chunks_exact(c).zip(a.data().chunks_exact(c)) {
        let r: Vec<f64> = t.iter().zip(at).map(|(x, y)| x + y).collect();
        let hidden: Vec<f64> = affine(fc1.0, Some(fc1.1), &layer_norm(&r, g2, b2)).into_iter().map(gelu).collect();
        let m = affine(fc2.0, Some(fc2.1), &hidden);
        out.extend(r.iter().zip(&m).map(|(x, y)| x + y));
    }
    Tensor::new(z.shape().to_vec(), out)
}

fn coords(i: usize, s: [usize; 3]) -> [usize; 3] {
    [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]]
}

/// Surface voxels: foreground with a background face neighbour or on the
/// volume border.
fn surface(m: &[bool], s: [usize; 3]) -> Vec<[usize; 3]> {
    let fg = |c: [isize; 3]| {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < s[a]) && m[(c[0] as usize * s[1] + c[1] as usize) * s[2] + c[2] as usize]
    };
    (0..m.len())
        .filter(|&i| m[i])
        .map(|i| coords(i, s))
        .filter(|p| {
            let c = p.map(|v| v as isize);
            let faces = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
            faces.iter().any(|o| !fg([c[0] + o[0], c[1] + o[1], c[2] + o[2]]))
        })
        .collect()
}

fn numpy_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Hausdorff distance by comparing every pair of surface voxels.
pub fn hausdorff_exhaustive(pred: &[bool], gt: &[bool], s: [usize; 3], spacing: [f64; 3], pct: f64) -> Option<f64> {
    let (a, b) = (surface(pred, s), surface(gt, s));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let mut d2 = 0.0;
                        for k in 0..3 {
                            let d = spacing[k] * (p[k] as f64 - q[k] as f64);
                            d2 += d * d;
                        }
                        d2
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    Some(numpy_percentile(directed(&a, &b), pct).max(numpy_percentile(directed(&b, &a), pct)))
}

/// Dense `[nW, T, T]` shifted-window mask from wrap flags: two tokens of a
/// window may attend iff, on every axis, both or neither came across the
/// torus seam.
pub fn shift_mask(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Tensor<f64> {
    let nw = [0, 1, 2].map(|a| grid[a] / window[a]);
    let t: usize = window.iter().product();
    let mut out = Vec::with_capacity(nw.iter().product::<usize>() * t * t);
    let tok = |w: [usize; 3], l: usize| {
        let lc = coords(l, window);
        [0, 1, 2].map(|a| w[a] * window[a] + lc[a])
    };
    let wrapped = |u: [usize; 3]| [0, 1, 2].map(|a| u[a] + shift[a] >= grid[a]);
    for wh in 0..nw[0] {
        for ww in 0..nw[1] {
            for wd in 0..nw[2] {
                for r in 0..t {
                    for c in 0..t {
                        let same = wrapped(tok([wh, ww, wd], r)) == wrapped(tok([wh, ww, wd], c));
                        out.push(if same { 0.0 } else { -1e9 });
                    }
                }
            }
        }
    }
    Tensor::new(vec![nw.iter().product(), t, t], out).expect("sized")
}
