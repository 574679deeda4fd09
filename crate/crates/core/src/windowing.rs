//! Window geometry for 3-D (shifted) window attention.
//!
//! Token grids are channel-last `[B, H, W, D, C]`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, RegionMask, Tensor, Var};

/// Effective window and shift for one grid, plus the padded grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
}

impl WindowConfig {
    /// Window `m` on `grid`; `shifted` requests a shift of `m / 2`. Axes with
    /// fewer than `m` tokens use a window equal to the extent and no shift.
    pub fn new(grid: [usize; 3], m: usize, shifted: bool) -> Result<Self> {
        if m == 0 || grid.contains(&0) {
            return Err(Error::InvalidArgument(format!("window {m} on grid {grid:?}")));
        }
        let mut window = [m; 3];
        let mut shift = [if shifted { m / 2 } else { 0 }; 3];
        for a in 0..3 {
            if grid[a] < m {
                window[a] = grid[a];
                shift[a] = 0;
            }
        }
        Self::explicit(grid, window, shift)
    }

    /// Exact window and shift, no clamping.
    pub fn explicit(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if window[a] == 0 || shift[a] >= window[a] {
                return Err(Error::InvalidArgument(format!(
                    "shift {shift:?} must be below window {window:?} on every axis"
                )));
            }
        }
        let padded = [0, 1, 2].map(|a| grid[a].div_ceil(window[a]) * window[a]);
        Ok(WindowConfig { grid, window, shift, padded })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_windows(&self) -> usize {
        (0..3).map(|a| self.padded[a] / self.window[a]).product()
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.grid
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    /// Region labels for the shifted, partitioned padded grid, or `None`
    /// when every window is a single region.
    pub fn mask(&self) -> Option<RegionMask> {
        if !self.is_shifted() && !self.is_padded() {
            return None;
        }
        let m = region_mask(self);
        (!m.is_trivial()).then_some(m)
    }
}

/// Segment index of coordinate `x` on a padded axis of extent `p`, window
/// `m`, shift `s`: `[0, p-m)`, `[p-m, p-s)`, `[p-s, p)`.
fn segment(x: usize, p: usize, m: usize, s: usize) -> u32 {
    if s == 0 || x < p - m {
        0
    } else if x < p - s {
        1
    } else {
        2
    }
}

fn region_mask(cfg: &WindowConfig) -> RegionMask {
    let [ph, pw, pd] = cfg.padded;
    let [mh, mw, md] = cfg.window;
    let [sh, sw, sd] = cfg.shift;
    let t = cfg.tokens_per_window();
    let mut labels = Vec::with_capacity(cfg.num_windows() * t);
    for wh in 0..ph / mh {
        for ww in 0..pw / mw {
            for wd in 0..pd / md {
                for lh in 0..mh {
                    for lw in 0..mw {
                        for ld in 0..md {
                            // shifted-frame coordinates give the region;
                            // the pre-shift position (+s on the torus) decides padding
                            let (uh, uw, ud) = (wh * mh + lh, ww * mw + lw, wd * md + ld);
                            let h = (uh + sh) % ph;
                            let w = (uw + sw) % pw;
                            let d = (ud + sd) % pd;
                            let pad = h >= cfg.grid[0] || w >= cfg.grid[1] || d >= cfg.grid[2];
                            let seg = segment(uh, ph, mh, sh) * 9 + segment(uw, pw, mw, sw) * 3 + segment(ud, pd, md, sd);
                            labels.push(seg + 27 * pad as u32);
                        }
                    }
                }
            }
        }
    }
    RegionMask::new(cfg.num_windows(), t, labels).expect("label count")
}

/// Dense additive mask `[num_windows, T, T]` (0 or -1e9) for a grid whose
/// extents are multiples of `window`.
pub fn compute_shift_mask<E: Element>(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Result<Tensor<E>> {
    let cfg = WindowConfig::explicit(grid, window, shift)?;
    if cfg.is_padded() {
        return Err(shape_err!("grid {grid:?} is not a multiple of window {window:?}"));
    }
    Ok(region_mask(&cfg).dense())
}

/// Record of zero padding added by [`pad_to_window_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub original: [usize; 3],
    pub padded: [usize; 3],
}

/// Zero-pads the spatial axes of `[B, H, W, D, C]` at the high end up to
/// multiples of `window`.
pub fn pad_to_window_multiple<'t, E: Element>(x: &Var<'t, E>, window: [usize; 3]) -> Result<(Var<'t, E>, PadRecord)> {
    let s = grid_shape(x)?;
    let original = [s[1], s[2], s[3]];
    let padded = [0, 1, 2].map(|a| original[a].div_ceil(window[a]) * window[a]);
    let pads = [(0, 0), (0, padded[0] - original[0]), (0, padded[1] - original[1]), (0, padded[2] - original[2]), (0, 0)];
    Ok((x.pad(&pads)?, PadRecord { original, padded }))
}

/// Inverse of [`pad_to_window_multiple`].
pub fn crop_padding<'t, E: Element>(x: &Var<'t, E>, rec: &PadRecord) -> Result<Var<'t, E>> {
    let s = grid_shape(x)?;
    if [s[1], s[2], s[3]] != rec.padded {
        return Err(shape_err!("grid {:?} does not match pad record {:?}", &s[1..4], rec));
    }
    let o = rec.original;
    x.slice(&[0..s[0], 0..o[0], 0..o[1], 0..o[2], 0..s[4]])
}

fn grid_shape<E: Element>(x: &Var<'_, E>) -> Result<Vec<usize>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(shape_err!("token grid must be [B, H, W, D, C], got {s:?}"));
    }
    Ok(s.to_vec())
}

/// `[B, H, W, D, C]` to `[B * nW, T, C]`, windows in row-major grid order
/// and tokens in row-major local order.
pub fn window_partition<'t, E: Element>(x: &Var<'t, E>, window: [usize; 3]) -> Result<Var<'t, E>> {
    let s = grid_shape(x)?;
    let [mh, mw, md] = window;
    if (0..3).any(|a| window[a] == 0 || s[a + 1] % window[a] != 0) {
        return Err(shape_err!("grid {:?} is not a multiple of window {window:?}", &s[1..4]));
    }
    let (b, h, w, d, c) = (s[0], s[1], s[2], s[3], s[4]);
    x.reshape(&[b, h / mh, mh, w / mw, mw, d / md, md, c])?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[b * (h / mh) * (w / mw) * (d / md), mh * mw * md, c])
}

/// Inverse of [`window_partition`] for a batch of `batch` grids of extent `grid`.
pub fn window_reverse<'t, E: Element>(ws: &Var<'t, E>, window: [usize; 3], grid: [usize; 3], batch: usize) -> Result<Var<'t, E>> {
    let s = ws.shape();
    let [mh, mw, md] = window;
    let [h, w, d] = grid;
    if (0..3).any(|a| window[a] == 0 || grid[a] % window[a] != 0) {
        return Err(shape_err!("grid {grid:?} is not a multiple of window {window:?}"));
    }
    let nw = (h / mh) * (w / mw) * (d / md);
    if s.len() != 3 || s[0] != batch * nw || s[1] != mh * mw * md {
        return Err(shape_err!(
            "window set {s:?} does not match {batch} grids of {grid:?} with window {window:?}"
        ));
    }
    let c = s[2];
    ws.reshape(&[batch, h / mh, w / mw, d / md, mh, mw, md, c])?
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape(&[batch, h, w, d, c])
}

/// Torus roll of the spatial axes by `-shift` (forward) or `+shift` (inverse).
pub fn cyclic_shift<'t, E: Element>(x: &Var<'t, E>, shift: [usize; 3], inverse: bool) -> Result<Var<'t, E>> {
    grid_shape(x)?;
    if shift == [0; 3] {
        return Ok(x.clone());
    }
    let sign = if inverse { 1 } else { -1 };
    x.roll(&[0, sign * shift[0] as isize, sign * shift[1] as isize, sign * shift[2] as isize, 0])
}
