//! 3-D convolution and transposed convolution via chunked im2col + GEMM.
//!
//! Column buffers cover a bounded number of output voxels at a time so the
//! working set stays small on full-resolution volumes.

use crate::error::{shape_err, Result};
use crate::tensor::element::{gemm, Element, MatLayout};
use crate::tensor::storage::Tensor;
use crate::tensor::tape::Var;

/// Target number of output voxels per column chunk.
const CHUNK_VOXELS: usize = 8192;

/// Geometry of a cross-correlation from an `inp` volume to an `out` volume.
#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn new(cin: usize, cout: usize, inp: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("conv stride must be >= 1"));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = inp[a] + 2 * pad;
            if k > padded {
                return Err(shape_err!(
                    "kernel {k} larger than padded input extent {padded} (input {inp:?}, padding {pad})"
                ));
            }
            out[a] = (padded - k) / stride + 1;
        }
        Ok(Geom { cin, cout, inp, out, k, stride, pad })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn in_vox(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.out.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Chunks of output rows `(oh, ow)`; each row spans the depth axis.
    fn row_chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = self.out[0] * self.out[1];
        let per = (CHUNK_VOXELS / self.out[2]).max(1);
        let mut start = 0;
        std::iter::from_fn(move || {
            (start < rows).then(|| {
                let end = (start + per).min(rows);
                let r = (start, end);
                start = end;
                r
            })
        })
    }

    /// Input index along one axis for output index `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0).then_some(i as usize)
    }

    /// Valid output range along depth for tap `kd`: od with 0 <= od*s+kd-p < D.
    fn depth_range(&self, kd: usize) -> (usize, usize) {
        let d_in = self.inp[2] as isize;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let mut lo = 0isize;
        while lo < self.out[2] as isize && lo * s + kd as isize - p < 0 {
            lo += 1;
        }
        let mut hi = self.out[2] as isize;
        while hi > lo && (hi - 1) * s + kd as isize - p >= d_in {
            hi -= 1;
        }
        (lo as usize, hi as usize)
    }

    /// Fills `col` ([kdim, rows*Dout]) for output rows `r0..r1` of one sample.
    fn im2col<E: Element>(&self, x: &[E], r0: usize, r1: usize, col: &mut [E]) {
        let [h, w, d] = self.inp;
        let dout = self.out[2];
        let ncols = (r1 - r0) * dout;
        let k = self.k;
        for c in 0..self.cin {
            for kh in 0..k {
                for kw in 0..k {
                    for kd in 0..k {
                        let krow = ((c * k + kh) * k + kw) * k + kd;
                        let dst_row = &mut col[krow * ncols..(krow + 1) * ncols];
                        let (lo, hi) = self.depth_range(kd);
                        for r in r0..r1 {
                            let (oh, ow) = (r / self.out[1], r % self.out[1]);
                            let dst = &mut dst_row[(r - r0) * dout..(r - r0 + 1) * dout];
                            let (ih, iw) = match (self.src(oh, kh), self.src(ow, kw)) {
                                (Some(ih), Some(iw)) if ih < h && iw < w => (ih, iw),
                                _ => {
                                    dst.fill(E::ZERO);
                                    continue;
                                }
                            };
                            let base = ((c * h + ih) * w + iw) * d;
                            dst[..lo].fill(E::ZERO);
                            dst[hi..].fill(E::ZERO);
                            if self.stride == 1 {
                                let s0 = base + lo + kd - self.pad;
                                dst[lo..hi].copy_from_slice(&x[s0..s0 + (hi - lo)]);
                            } else {
                                for od in lo..hi {
                                    dst[od] = x[base + od * self.stride + kd - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into `x` (adjoint of `im2col`).
    fn col2im<E: Element>(&self, col: &[E], r0: usize, r1: usize, x: &mut [E]) {
        let [h, w, d] = self.inp;
        let dout = self.out[2];
        let ncols = (r1 - r0) * dout;
        let k = self.k;
        for c in 0..self.cin {
            for kh in 0..k {
                for kw in 0..k {
                    for kd in 0..k {
                        let krow = ((c * k + kh) * k + kw) * k + kd;
                        let src_row = &col[krow * ncols..(krow + 1) * ncols];
                        let (lo, hi) = self.depth_range(kd);
                        for r in r0..r1 {
                            let (oh, ow) = (r / self.out[1], r % self.out[1]);
                            let (ih, iw) = match (self.src(oh, kh), self.src(ow, kw)) {
                                (Some(ih), Some(iw)) if ih < h && iw < w => (ih, iw),
                                _ => continue,
                            };
                            let src = &src_row[(r - r0) * dout..(r - r0 + 1) * dout];
                            let base = ((c * h + ih) * w + iw) * d;
                            for od in lo..hi {
                                x[base + od * self.stride + kd - self.pad] += src[od];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `y[n] (cout x out_vox) = W (cout x kdim) . im2col(x[n])`.
    fn forward<E: Element>(&self, n: usize, x: &[E], w: &[E], y: &mut [E]) {
        let (iv, ov, kd) = (self.in_vox(), self.out_vox(), self.kdim());
        for b in 0..n {
            let xb = &x[b * self.cin * iv..(b + 1) * self.cin * iv];
            let yb = &mut y[b * self.cout * ov..(b + 1) * self.cout * ov];
            if self.pointwise() {
                gemm(self.cout, kd, ov, E::ONE, w, MatLayout::row_major(0, kd), xb,
                    MatLayout::row_major(0, ov), E::ZERO, yb, MatLayout::row_major(0, ov));
                continue;
            }
            let mut col = Vec::new();
            for (r0, r1) in self.row_chunks() {
                let ncols = (r1 - r0) * self.out[2];
                col.resize(kd * ncols, E::ZERO);
                self.im2col(xb, r0, r1, &mut col);
                gemm(self.cout, kd, ncols, E::ONE, w, MatLayout::row_major(0, kd), &col,
                    MatLayout::row_major(0, ncols), E::ZERO, yb,
                    MatLayout::strided(r0 * self.out[2], ov, 1));
            }
        }
    }

    /// `dx[n] += col2im(W^T . dy[n])`.
    fn backward_input<E: Element>(&self, n: usize, dy: &[E], w: &[E], dx: &mut [E]) {
        let (iv, ov, kd) = (self.in_vox(), self.out_vox(), self.kdim());
        for b in 0..n {
            let dyb = &dy[b * self.cout * ov..(b + 1) * self.cout * ov];
            let dxb = &mut dx[b * self.cin * iv..(b + 1) * self.cin * iv];
            if self.pointwise() {
                gemm(kd, self.cout, ov, E::ONE, w, MatLayout::transposed(0, kd), dyb,
                    MatLayout::row_major(0, ov), E::ONE, dxb, MatLayout::row_major(0, ov));
                continue;
            }
            let mut col = Vec::new();
            for (r0, r1) in self.row_chunks() {
                let ncols = (r1 - r0) * self.out[2];
                col.resize(kd * ncols, E::ZERO);
                gemm(kd, self.cout, ncols, E::ONE, w, MatLayout::transposed(0, kd), dyb,
                    MatLayout::strided(r0 * self.out[2], ov, 1), E::ZERO, &mut col,
                    MatLayout::row_major(0, ncols));
                self.col2im(&col, r0, r1, dxb);
            }
        }
    }

    /// `dw += dy[n] . im2col(x[n])^T`.
    fn backward_weight<E: Element>(&self, n: usize, dy: &[E], x: &[E], dw: &mut [E]) {
        let (iv, ov, kd) = (self.in_vox(), self.out_vox(), self.kdim());
        for b in 0..n {
            let xb = &x[b * self.cin * iv..(b + 1) * self.cin * iv];
            let dyb = &dy[b * self.cout * ov..(b + 1) * self.cout * ov];
            if self.pointwise() {
                gemm(self.cout, ov, kd, E::ONE, dyb, MatLayout::row_major(0, ov), xb,
                    MatLayout::transposed(0, ov), E::ONE, dw, MatLayout::row_major(0, kd));
                continue;
            }
            let mut col = Vec::new();
            for (r0, r1) in self.row_chunks() {
                let ncols = (r1 - r0) * self.out[2];
                col.resize(kd * ncols, E::ZERO);
                self.im2col(xb, r0, r1, &mut col);
                gemm(self.cout, ncols, kd, E::ONE, dyb,
                    MatLayout::strided(r0 * self.out[2], ov, 1), &col,
                    MatLayout::transposed(0, ncols), E::ONE, dw, MatLayout::row_major(0, kd));
            }
        }
    }
}

fn add_channel_bias<E: Element>(y: &mut [E], bias: &[E], vox: usize) {
    let c = bias.len();
    for (i, chunk) in y.chunks_exact_mut(vox).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<E: Element>(g: &[E], channels: usize, vox: usize) -> Tensor<E> {
    let mut acc = vec![0.0f64; channels];
    for (i, chunk) in g.chunks_exact(vox).enumerate() {
        acc[i % channels] += chunk.iter().map(|v| v.to_f64()).sum::<f64>();
    }
    Tensor::from_parts(vec![channels], acc.into_iter().map(E::from_f64).collect())
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn cubic_kernel(ws: &[usize]) -> Option<usize> {
    (ws.len() == 5 && ws[2] == ws[3] && ws[3] == ws[4]).then_some(ws[2])
}

impl<'t, E: Element> Var<'t, E> {
    /// Cross-correlation of `[N, Cin, H, W, D]` with `[Cout, Cin, k, k, k]`.
    pub fn conv3d(
        &self,
        weight: &Var<'t, E>,
        bias: Option<&Var<'t, E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, E>> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        let k = cubic_kernel(&ws).ok_or_else(|| shape_err!("conv3d weight must be [Cout, Cin, k, k, k], got {ws:?}"))?;
        if xs.len() != 5 || xs[1] != ws[1] {
            return Err(shape_err!("conv3d input {xs:?} incompatible with weight {ws:?}"));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(shape_err!("conv3d bias {:?} for {} output channels", b.shape(), ws[0]));
            }
        }
        let n = xs[0];
        let g = Geom::new(xs[1], ws[0], spatial(&xs), k, stride, padding)?;
        let mut out = Tensor::zeros(vec![n, g.cout, g.out[0], g.out[1], g.out[2]]);
        g.forward(n, self.value().data(), weight.value().data(), out.data_mut());
        if let Some(b) = bias {
            add_channel_bias(out.data_mut(), b.value().data(), g.out_vox());
        }
        let tape = self.tape();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        if !tape.needs_grad(&inputs) {
            return Ok(tape.constant(out));
        }
        let (x, w) = (self.value_arc(), weight.value_arc());
        let has_bias = bias.is_some();
        Ok(tape.record(out, &inputs, move |gy, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(x.shape().to_vec());
                g.backward_input(n, gy.data(), w.data(), gx.data_mut());
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(w.shape().to_vec());
                g.backward_weight(n, gy.data(), x.data(), gw.data_mut());
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| channel_sums(gy.data(), g.cout, g.out_vox())));
            }
            grads
        }))
    }

    /// Transposed convolution (padding 0) of `[N, Cin, H, W, D]` with weight
    /// `[Cin, Cout, k, k, k]`; output extent `(in - 1) * stride + k`.
    pub fn conv_transpose3d(
        &self,
        weight: &Var<'t, E>,
        bias: Option<&Var<'t, E>>,
        stride: usize,
    ) -> Result<Var<'t, E>> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        let k = cubic_kernel(&ws)
            .ok_or_else(|| shape_err!("conv_transpose3d weight must be [Cin, Cout, k, k, k], got {ws:?}"))?;
        if xs.len() != 5 || xs[1] != ws[0] {
            return Err(shape_err!("conv_transpose3d input {xs:?} incompatible with weight {ws:?}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv_transpose3d stride must be >= 1"));
        }
        let (n, cin, cout) = (xs[0], ws[0], ws[1]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err!("conv_transpose3d bias {:?} for {cout} output channels", b.shape()));
            }
        }
        let in_sp = spatial(&xs);
        let out_sp = in_sp.map(|d| (d - 1) * stride + k);
        // the adjoint conv maps our output (cout channels) back to our input (cin channels)
        let g = Geom::new(cout, cin, out_sp, k, stride, 0)?;
        debug_assert_eq!(g.out, in_sp);
        let mut out = Tensor::zeros(vec![n, cout, out_sp[0], out_sp[1], out_sp[2]]);
        g.backward_input(n, self.value().data(), weight.value().data(), out.data_mut());
        if let Some(b) = bias {
            add_channel_bias(out.data_mut(), b.value().data(), g.in_vox());
        }
        let tape = self.tape();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        if !tape.needs_grad(&inputs) {
            return Ok(tape.constant(out));
        }
        let (x, w) = (self.value_arc(), weight.value_arc());
        let has_bias = bias.is_some();
        Ok(tape.record(out, &inputs, move |gy, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(x.shape().to_vec());
                g.forward(n, gy.data(), w.data(), gx.data_mut());
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(w.shape().to_vec());
                g.backward_weight(n, x.data(), gy.data(), gw.data_mut());
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| channel_sums(gy.data(), cout, g.in_vox())));
            }
            grads
        }))
    }
}
