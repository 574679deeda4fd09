use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{shape_err, Result};
use crate::tensor::element::Element;
use crate::tensor::storage::{strides, Tensor};
use crate::tensor::tape::Var;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                st[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, in_index)` for every element of `out`.
fn for_each_broadcast(shape: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    if shape == out {
        (0..out.iter().product()).for_each(|i| f(i, i));
        return;
    }
    let n: usize = out.iter().product();
    let in_numel: usize = shape.iter().product();
    // trailing-suffix broadcast (e.g. bias [C] over [.., C])
    if out.ends_with(shape) || in_numel == 1 {
        (0..n).for_each(|i| f(i, i % in_numel));
        return;
    }
    let st = aligned_strides(shape, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to_shape<E: Element>(grad: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    {
        let o = out.data_mut();
        let g = grad.data();
        for_each_broadcast(shape, grad.shape(), |gi, oi| o[oi] += g[gi]);
    }
    out
}

fn broadcast_binary<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let mut out = vec![E::ZERO; n];
    if a.shape() == out_shape.as_slice() {
        let ad = a.data();
        let bd = b.data();
        for_each_broadcast(b.shape(), &out_shape, |i, j| out[i] = f(ad[i], bd[j]));
    } else if b.shape() == out_shape.as_slice() {
        let ad = a.data();
        let bd = b.data();
        for_each_broadcast(a.shape(), &out_shape, |i, j| out[i] = f(ad[j], bd[i]));
    } else {
        let mut ai = vec![0; n];
        for_each_broadcast(a.shape(), &out_shape, |i, j| ai[i] = j);
        let ad = a.data();
        let bd = b.data();
        for_each_broadcast(b.shape(), &out_shape, |i, j| out[i] = f(ad[ai[i]], bd[j]));
    }
    Ok(Tensor::from_parts(out_shape, out))
}

fn unary<'t, E: Element>(
    x: &Var<'t, E>,
    f: impl Fn(E) -> E,
    df: impl Fn(E) -> E + 'static,
) -> Var<'t, E> {
    let out = x.value().map(f);
    let tape = x.tape();
    if !tape.needs_grad(&[x]) {
        return tape.constant(out);
    }
    let xv = x.value_arc();
    tape.record(out, &[x], move |g, _| {
        let gx = Tensor::from_parts(
            g.shape().to_vec(),
            g.data()
                .iter()
                .zip(xv.data())
                .map(|(&g, &x)| g * df(x))
                .collect(),
        );
        vec![Some(gx)]
    })
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

impl<'t, E: Element> Var<'t, E> {
    /// Broadcasting addition.
    pub fn add(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a + b)?;
        let tape = self.tape();
        if !tape.needs_grad(&[self, other]) {
            return Ok(tape.constant(out));
        }
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(tape.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g, &sa)),
                needs[1].then(|| reduce_to_shape(g, &sb)),
            ]
        }))
    }

    pub fn sub(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a - b)?;
        let tape = self.tape();
        if !tape.needs_grad(&[self, other]) {
            return Ok(tape.constant(out));
        }
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(tape.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g, &sa)),
                needs[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)),
            ]
        }))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a * b)?;
        let tape = self.tape();
        if !tape.needs_grad(&[self, other]) {
            return Ok(tape.constant(out));
        }
        let (a, b) = (self.value_arc(), other.value_arc());
        Ok(tape.record(out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let full = broadcast_binary(g, &b, |g, b| g * b).expect("shapes checked");
                reduce_to_shape(&full, a.shape())
            });
            let gb = needs[1].then(|| {
                let full = broadcast_binary(g, &a, |g, a| g * a).expect("shapes checked");
                reduce_to_shape(&full, b.shape())
            });
            vec![ga, gb]
        }))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: f64) -> Var<'t, E> {
        let f = E::from_f64(factor);
        unary(self, move |x| x * f, move |_| f)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, E> {
        let c = E::from_f64(c);
        unary(self, move |x| x + c, |_| E::ONE)
    }

    pub fn neg(&self) -> Var<'t, E> {
        self.scale(-1.0)
    }

    pub fn sigmoid(&self) -> Var<'t, E> {
        let out = self.value().map(sigmoid_scalar);
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return tape.constant(out);
        }
        let out = std::sync::Arc::new(out);
        let y = out.clone();
        tape.record_arc(out, &[self], move |g, _| {
            let gx = g
                .zip_map(&y, |g, y| g * y * (E::ONE - y))
                .expect("same shape");
            vec![Some(gx)]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'t, E> {
        unary(
            self,
            |x| E::from_f64(gelu_f64(x.to_f64())),
            |x| E::from_f64(gelu_grad_f64(x.to_f64())),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, E> {
        let s = E::from_f64(slope);
        if let Some(mask) = crate::tensor::gradcheck::branch_hook(self.value()) {
            let out = Tensor::from_parts(
                self.shape().to_vec(),
                self.value().data().iter().zip(mask.iter()).map(|(&x, &pos)| if pos { x } else { x * s }).collect(),
            );
            return self.tape().constant(out);
        }
        unary(
            self,
            move |x| if x >= E::ZERO { x } else { x * s },
            move |x| if x >= E::ZERO { E::ONE } else { s },
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Var<'t, E> {
        let total: f64 = self.value().sum_f64();
        let out = Tensor::scalar(E::from_f64(total));
        let tape = self.tape();
        if !tape.needs_grad(&[self]) {
            return tape.constant(out);
        }
        let shape = self.shape().to_vec();
        tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t, E> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheckConfig};
    use crate::tensor::tape::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_exactly_half() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![3]));
        assert!(x.sigmoid().value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn add_zero_is_bit_identical() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[0.1, -2.5, 1e-300, 7.0]));
        let z = tape.constant(Tensor::zeros(vec![4]));
        assert_eq!(x.add(&z).unwrap().value(), x.value());
    }

    #[test]
    fn broadcast_mismatch_is_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn broadcast_add_middle_axis() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let b = tape.constant(t(&[3, 1], &[10.0, 20.0, 30.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().at(&[1, 2, 1]), 11.0 + 30.0);
        assert_eq!(c.value().at(&[0, 1, 0]), 2.0 + 20.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        tape.backward(&x.sum()).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), Tensor::ones(vec![2, 2]));
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let tape = Tape::<f64>::new();
        let v = [1.0, -2.0, 3.0, 0.5];
        let x = tape.variable(t(&[4], &v));
        tape.backward(&x.mul(&x).unwrap().sum()).unwrap();
        let g = tape.grad(&x).unwrap();
        for (gi, vi) in g.data().iter().zip(v) {
            assert_eq!(*gi, 2.0 * vi);
        }
    }

    #[test]
    fn fan_out_accumulates_branch_gradients() {
        let v = [0.3, -1.2, 2.0];
        // both branches together
        let tape = Tape::<f64>::new();
        let x = tape.variable(t(&[3], &v));
        let y = x.gelu().add(&x.scale(3.0)).unwrap().sum();
        tape.backward(&y).unwrap();
        let both = tape.grad(&x).unwrap();
        // each branch alone
        let t1 = Tape::<f64>::new();
        let x1 = t1.variable(t(&[3], &v));
        t1.backward(&x1.gelu().sum()).unwrap();
        let t2 = Tape::<f64>::new();
        let x2 = t2.variable(t(&[3], &v));
        t2.backward(&x2.scale(3.0).sum()).unwrap();
        let sum = t1.grad(&x1).unwrap().zip_map(&t2.grad(&x2).unwrap(), |a, b| a + b).unwrap();
        assert!(both.max_abs_diff(&sum) < 1e-15);
    }

    #[test]
    fn gradchecks() {
        let cfg = GradCheckConfig::default();
        let x = t(&[5], &[-2.0, -0.3, 0.1, 0.7, 2.2]);
        let b = t(&[1, 5], &[0.5, -1.0, 2.0, 0.0, 0.3]);
        let errs = [
            finite_difference_check(&x, &cfg, |v| Ok(v.gelu().sum())).unwrap(),
            finite_difference_check(&x, &cfg, |v| Ok(v.sigmoid().mul(v)?.sum())).unwrap(),
            finite_difference_check(&x, &cfg, |v| Ok(v.leaky_relu(0.01).mul(v)?.sum())).unwrap(),
            finite_difference_check(&x, &cfg, |v| {
                let bb = v.tape().constant(b.clone());
                Ok(v.mul(&bb)?.mul(v)?.sum())
            })
            .unwrap(),
        ];
        for (name, err) in ["gelu", "sigmoid", "leaky", "mul_bcast"].iter().zip(errs) {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
