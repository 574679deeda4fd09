use super::elementwise::{broadcast_shape, reduce_to_shape};
use crate::error::{shape_err, Result};
use crate::tensor::element::{gemm, Element, MatLayout};
use crate::tensor::storage::{strides, Tensor};
use crate::tensor::tape::Var;

/// Offsets of each broadcast batch entry into an operand's batch dims.
fn batch_offsets(batch: &[usize], out_batch: &[usize], mat: usize) -> Vec<usize> {
    let lead = out_batch.len() - batch.len();
    let st = strides(batch);
    let n: usize = out_batch.iter().product();
    let out_st = strides(out_batch);
    (0..n)
        .map(|flat| {
            let mut off = 0;
            for (ax, &os) in out_st.iter().enumerate() {
                let i = (flat / os) % out_batch[ax];
                if ax >= lead && batch[ax - lead] != 1 {
                    off += i * st[ax - lead];
                }
            }
            off * mat
        })
        .collect()
}

/// `op(a) @ op(b)` over broadcast batch dims, where `op` optionally transposes
/// the trailing two axes.
fn batched_matmul<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<E>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ar, ac) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (br, bc) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(shape_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let a_batch = &a.shape()[..a.rank() - 2];
    let b_batch = &b.shape()[..b.rank() - 2];
    let out_batch = broadcast_shape(a_batch, b_batch).map_err(|_| {
        shape_err!(
            "matmul batch extents not broadcastable: {:?} x {:?}",
            a.shape(),
            b.shape()
        )
    })?;
    let a_offs = batch_offsets(a_batch, &out_batch, ar * ac);
    let b_offs = batch_offsets(b_batch, &out_batch, br * bc);
    let mut shape = out_batch.clone();
    shape.extend([m, n]);
    let mut out = Tensor::zeros(shape);
    let c = out.data_mut();
    for (i, (&ao, &bo)) in a_offs.iter().zip(&b_offs).enumerate() {
        let la = if trans_a {
            MatLayout::transposed(ao, ac)
        } else {
            MatLayout::row_major(ao, ac)
        };
        let lb = if trans_b {
            MatLayout::transposed(bo, bc)
        } else {
            MatLayout::row_major(bo, bc)
        };
        gemm(
            m,
            ka,
            n,
            E::ONE,
            a.data(),
            la,
            b.data(),
            lb,
            E::ZERO,
            c,
            MatLayout::row_major(i * m * n, n),
        );
    }
    Ok(out)
}

impl<'t, E: Element> Var<'t, E> {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    pub fn matmul(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let out = batched_matmul(self.value(), other.value(), false, false)?;
        let tape = self.tape();
        if !tape.needs_grad(&[self, other]) {
            return Ok(tape.constant(out));
        }
        let (a, b) = (self.value_arc(), other.value_arc());
        Ok(tape.record(out, &[self, other], move |g, needs| {
            // dA = dC . B^T, dB = A^T . dC
            let ga = needs[0].then(|| {
                let full = batched_matmul(g, &b, false, true).expect("checked shapes");
                reduce_batch(&full, a.shape())
            });
            let gb = needs[1].then(|| {
                let full = batched_matmul(&a, g, true, false).expect("checked shapes");
                reduce_batch(&full, b.shape())
            });
            vec![ga, gb]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t, E>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", self.shape()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Affine map over the last axis: `x . w^T + b` with `w: [out, in]`.
    pub fn linear(&self, weight: &Var<'t, E>, bias: Option<&Var<'t, E>>) -> Result<Var<'t, E>> {
        let xs = self.shape();
        let ws = weight.shape();
        let din = *xs.last().expect("non-empty shape");
        if ws.len() != 2 || ws[1] != din {
            return Err(shape_err!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let dout = ws[0];
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(shape_err!("linear: bias {:?} for {dout} outputs", b.shape()));
            }
        }
        let rows = self.value().numel() / din;
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("non-empty") = dout;
        let mut out = Tensor::zeros(shape);
        gemm(
            rows,
            din,
            dout,
            E::ONE,
            self.value().data(),
            MatLayout::row_major(0, din),
            weight.value().data(),
            MatLayout::transposed(0, din),
            E::ZERO,
            out.data_mut(),
            MatLayout::row_major(0, dout),
        );
        if let Some(b) = bias {
            let bd = b.value().data();
            for row in out.data_mut().chunks_exact_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let tape = self.tape();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        if !tape.needs_grad(&inputs) {
            return Ok(tape.constant(out));
        }
        let (x, w) = (self.value_arc(), weight.value_arc());
        let has_bias = bias.is_some();
        Ok(tape.record(out, &inputs, move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(x.shape().to_vec());
                gemm(
                    rows,
                    dout,
                    din,
                    E::ONE,
                    gd,
                    MatLayout::row_major(0, dout),
                    w.data(),
                    MatLayout::row_major(0, din),
                    E::ZERO,
                    gx.data_mut(),
                    MatLayout::row_major(0, din),
                );
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(vec![dout, din]);
                gemm(
                    dout,
                    rows,
                    din,
                    E::ONE,
                    gd,
                    MatLayout::transposed(0, dout),
                    x.data(),
                    MatLayout::row_major(0, din),
                    E::ZERO,
                    gw.data_mut(),
                    MatLayout::row_major(0, din),
                );
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![E::ZERO; dout];
                    for row in gd.chunks_exact(dout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(vec![dout], gb)
                }));
            }
            grads
        }))
    }
}

/// Reduces a gradient over broadcast batch dims back to `shape`.
fn reduce_batch<E: Element>(full: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
    if full.shape() == shape {
        return full.clone();
    }
    reduce_to_shape(full, shape)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheckConfig};
    use crate::tensor::tape::Tape;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_times_identity() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::from_f64_slice(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(i.matmul(&i).unwrap().value(), i.value());
    }

    #[test]
    fn hand_sum() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64_slice(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_f64_slice(vec![2, 1], &[1.0, 1.0]).unwrap());
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GradCheckConfig::default();
        for _ in 0..3 {
            let a = rand_t(&[3, 4], &mut rng);
            let b = rand_t(&[4, 2], &mut rng);
            let bb = b.clone();
            let ea = finite_difference_check(&a, &cfg, |x| {
                let w = x.tape().constant(bb.clone());
                let y = x.matmul(&w)?;
                y.mul(&y).map(|v| v.sum())
            })
            .unwrap();
            let aa = a.clone();
            let eb = finite_difference_check(&b, &cfg, |x| {
                let l = x.tape().constant(aa.clone());
                let y = l.matmul(x)?;
                y.mul(&y).map(|v| v.sum())
            })
            .unwrap();
            assert!(ea < 1e-4 && eb < 1e-4, "{ea} {eb}");
        }
    }

    #[test]
    fn batched_broadcast_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_t(&[2, 3, 3, 4], &mut rng);
        let b = rand_t(&[3, 4, 2], &mut rng);
        let cfg = GradCheckConfig::default();
        let aa = a.clone();
        let err = finite_difference_check(&b, &cfg, |x| {
            let l = x.tape().constant(aa.clone());
            let y = l.matmul(x)?;
            y.mul(&y).map(|v| v.sum())
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_matches_matmul_and_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&[2, 3, 4], &mut rng);
        let w = rand_t(&[5, 4], &mut rng);
        let b = rand_t(&[5], &mut rng);
        let tape = Tape::<f64>::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let fused = xv.linear(&wv, Some(&bv)).unwrap();
        let composed = xv.matmul(&wv.transpose_last().unwrap()).unwrap().add(&bv).unwrap();
        assert!(fused.value().max_abs_diff(composed.value()) < 1e-14);

        let cfg = GradCheckConfig::default();
        let (w2, b2) = (w.clone(), b.clone());
        let ex = finite_difference_check(&x, &cfg, |v| {
            let t = v.tape();
            let y = v.linear(&t.constant(w2.clone()), Some(&t.constant(b2.clone())))?;
            y.mul(&y).map(|v| v.sum())
        })
        .unwrap();
        let (x2, b3) = (x.clone(), b.clone());
        let ew = finite_difference_check(&w, &cfg, |v| {
            let t = v.tape();
            let y = t.constant(x2.clone()).linear(v, Some(&t.constant(b3.clone())))?;
            y.mul(&y).map(|v| v.sum())
        })
        .unwrap();
        let (x3, w3) = (x.clone(), w.clone());
        let eb = finite_difference_check(&b, &cfg, |v| {
            let t = v.tape();
            let y = t.constant(x3.clone()).linear(&t.constant(w3.clone()), Some(v))?;
            y.mul(&y).map(|v| v.sum())
        })
        .unwrap();
        assert!(ex < 1e-4 && ew < 1e-4 && eb < 1e-4, "{ex} {ew} {eb}");
    }
}
