use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::tensor::element::Element;
use crate::tensor::storage::{numel, strides, Tensor};
use crate::tensor::tape::Var;

pub(crate) fn permute_tensor<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let in_shape = x.shape();
    let in_st = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let rank = out_shape.len();
    let n = x.numel();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let last = out_shape[rank - 1];
    let last_st = src_st[rank - 1];
    let outer = n / last;
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        if last_st == 1 {
            out.extend_from_slice(&src[base..base + last]);
        } else {
            out.extend((0..last).map(|j| src[base + j * last_st]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Circular shift of each listed axis by its amount (positive moves toward
/// higher indices).
pub(crate) fn roll_tensor<E: Element>(x: &Tensor<E>, shifts: &[isize]) -> Tensor<E> {
    let shape = x.shape();
    let st = strides(shape);
    let rank = shape.len();
    let n = x.numel();
    let src = x.data();
    let mut out = vec![E::ZERO; n];
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &d)| s.rem_euclid(d as isize) as usize)
        .collect();
    // copy along the last axis in at most two contiguous pieces
    let last = shape[rank - 1];
    let sl = norm[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    for row in 0..n / last {
        let mut dst = 0;
        for ax in 0..rank - 1 {
            dst += ((idx[ax] + norm[ax]) % shape[ax]) * st[ax];
        }
        let s = &src[row * last..(row + 1) * last];
        out[dst + sl..dst + last].copy_from_slice(&s[..last - sl]);
        out[dst..dst + sl].copy_from_slice(&s[last - sl..]);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Zero padding with `(before, after)` per axis.
pub(crate) fn pad_tensor<E: Element>(x: &Tensor<E>, pads: &[(usize, usize)]) -> Tensor<E> {
    let shape = x.shape();
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(pads)
        .map(|(&d, &(a, b))| d + a + b)
        .collect();
    let ranges: Vec<Range<usize>> = shape
        .iter()
        .zip(pads)
        .map(|(&d, &(a, _))| a..a + d)
        .collect();
    let mut out = Tensor::zeros(out_shape.clone());
    for_each_block_row(&out_shape, &ranges, |row, off, len| {
        out.data_mut()[off..off + len].copy_from_slice(&x.data()[row * len..(row + 1) * len]);
    });
    out
}

pub(crate) fn slice_tensor<E: Element>(x: &Tensor<E>, ranges: &[Range<usize>]) -> Tensor<E> {
    let out_shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
    let mut out = Vec::with_capacity(numel(&out_shape));
    for_each_block_row(x.shape(), ranges, |_, off, len| {
        out.extend_from_slice(&x.data()[off..off + len]);
    });
    Tensor::from_parts(out_shape, out)
}

/// Visits the rows (runs along the last axis) of the `ranges` block inside a
/// tensor of shape `big_shape`: `f(row_index_in_block, offset_in_big, run_len)`.
fn for_each_block_row(big_shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize, usize)) {
    let rank = big_shape.len();
    let st = strides(big_shape);
    let last = ranges[rank - 1].len();
    let rows: usize = ranges[..rank - 1].iter().map(|r| r.len()).product();
    let mut idx = vec![0usize; rank - 1];
    for row in 0..rows {
        let mut off = ranges[rank - 1].start;
        for ax in 0..rank - 1 {
            off += (ranges[ax].start + idx[ax]) * st[ax];
        }
        f(row, off, last);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < ranges[ax].len() {
                break;
            }
            idx[ax] = 0;
        }
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, E>> {
        if numel(shape) != self.value().numel() {
            return Err(shape_err!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape(),
                self.value().numel()
            ));
        }
        let out = self.value().clone().reshaped(shape.to_vec())?;
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant(out));
        }
        let orig = self.shape().to_vec();
        Ok(tape.record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshaped(orig).expect("same numel"))]
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, E>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for shape {:?}", self.shape()));
        }
        let out = permute_tensor(self.value(), perm);
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant(out));
        }
        let inv = invert_perm(perm);
        Ok(tape.record(out, &[self], move |g, _| vec![Some(permute_tensor(g, &inv))]))
    }

    /// Circular shift; `shifts[i]` applies to axis `i`.
    pub fn roll(&self, shifts: &[isize]) -> Result<Var<'t, E>> {
        if shifts.len() != self.shape().len() {
            return Err(shape_err!("roll: {} shifts for shape {:?}", shifts.len(), self.shape()));
        }
        let out = roll_tensor(self.value(), shifts);
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant(out));
        }
        let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
        Ok(tape.record(out, &[self], move |g, _| vec![Some(roll_tensor(g, &back))]))
    }

    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Var<'t, E>> {
        if pads.len() != self.shape().len() {
            return Err(shape_err!("pad: {} pairs for shape {:?}", pads.len(), self.shape()));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self.clone());
        }
        let out = pad_tensor(self.value(), pads);
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant(out));
        }
        let ranges: Vec<Range<usize>> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(a, _))| a..a + d)
            .collect();
        Ok(tape.record(out, &[self], move |g, _| vec![Some(slice_tensor(g, &ranges))]))
    }

    /// Sub-block selected by one range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Var<'t, E>> {
        let shape = self.shape();
        if ranges.len() != shape.len()
            || ranges.iter().zip(shape).any(|(r, &d)| r.start >= r.end || r.end > d)
        {
            return Err(shape_err!("slice {ranges:?} out of bounds for shape {shape:?}"));
        }
        if ranges.iter().zip(shape).all(|(r, &d)| r.start == 0 && r.end == d) {
            return Ok(self.clone());
        }
        let out = slice_tensor(self.value(), ranges);
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant(out));
        }
        let pads: Vec<(usize, usize)> = ranges
            .iter()
            .zip(shape)
            .map(|(r, &d)| (r.start, d - r.end))
            .collect();
        Ok(tape.record(out, &[self], move |g, _| vec![Some(pad_tensor(g, &pads))]))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, E>> {
        let mut ranges: Vec<Range<usize>> = self.shape().iter().map(|&d| 0..d).collect();
        if axis >= ranges.len() {
            return Err(shape_err!("narrow: axis {axis} for shape {:?}", self.shape()));
        }
        ranges[axis] = start..start + len;
        self.slice(&ranges)
    }

    /// Concatenation along `axis`; the backward pass splits the gradient.
    pub fn concat(parts: &[&Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(shape_err!("concat axis {axis} for rank {rank}"));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "concat along {axis}: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let run = e * inner;
                out.extend_from_slice(&p.value().data()[o * run..(o + 1) * run]);
            }
        }
        let out = Tensor::from_parts(shape, out);
        let tape = first.tape();
        if !tape.needs_grad(parts) {
            return Ok(tape.constant(out));
        }
        Ok(tape.record(out, parts, move |g, needs| {
            let mut grads = Vec::with_capacity(extents.len());
            let mut start = 0;
            for (i, &e) in extents.iter().enumerate() {
                if needs[i] {
                    let mut part = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = o * total * inner + start * inner;
                        part.extend_from_slice(&g.data()[base..base + e * inner]);
                    }
                    let mut s = g.shape().to_vec();
                    s[axis] = e;
                    grads.push(Some(Tensor::from_parts(s, part)));
                } else {
                    grads.push(None);
                }
                start += e;
            }
            grads
        }))
    }

    /// Rows of a 2-D table: `[rows, cols]` indexed by `indices` gives
    /// `[indices.len(), cols]`. The backward pass scatter-adds.
    pub fn index_rows(&self, indices: std::sync::Arc<Vec<usize>>) -> Result<Var<'t, E>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(shape_err!("index_rows needs a 2-D table, got {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("index {bad} out of range for {rows} rows"));
        }
        let src = self.value().data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![indices.len(), cols], out);
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return Ok(tape.constant(out));
        }
        Ok(tape.record(out, &[self], move |g, _| {
            let mut gt = Tensor::zeros(vec![rows, cols]);
            let d = gt.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    d[i * cols + c] += g.data()[k * cols + c];
                }
            }
            vec![Some(gt)]
        }))
    }
}
