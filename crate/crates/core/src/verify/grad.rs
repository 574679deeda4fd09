//! Finite-difference checks of every differentiable op and of a tiny model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::CheckResult;
use crate::error::Result;
use crate::metrics::DICE_EPS;
use crate::model::{ModelConfig, SwinUnetr};
use crate::tensor::gradcheck::{record_branches, relative_error, replay_branches};
use crate::tensor::{finite_difference_check, DType, Element, GradCheckConfig, ParamId, RegionMask, Tape, Tensor, Var};
use crate::volume::{normalize_nonzero, synth_case, SynthConfig};
use crate::windowing::{crop_padding, cyclic_shift, pad_to_window_multiple, window_partition, window_reverse};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL_F64: f64 = 1e-4;
pub const MODEL_TOL_F32: f64 = 1e-2;

const SUITE: &str = "gradcheck";

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values in `[0.1, 1]` with random sign: keeps kinks out of the stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_t(shape, seed).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// Contracts any output with fixed pseudo-random weights, so every output
/// element reaches the scalar with a distinct coefficient.
fn weighted<'a>(y: Var<'a, f64>) -> Result<Var<'a, f64>> {
    let r = Tensor::from_fn(y.shape().to_vec(), |i| (i as f64 * 0.618034 + 0.1).sin());
    Ok(y.mul(&y.tape().constant(r))?.sum())
}

fn op<F>(out: &mut Vec<CheckResult>, name: &str, x: &Tensor<f64>, f: F)
where
    F: for<'a> Fn(&Var<'a, f64>) -> Result<Var<'a, f64>>,
{
    let err = finite_difference_check(x, &GradCheckConfig::default(), |v| weighted(f(v)?));
    out.push(CheckResult::below(SUITE, name, err, OP_TOL));
}

/// Float64 checks (eps 1e-4, every coordinate) of each differentiable op.
pub fn op_gradchecks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let x = rand_t(&[3, 4], 1);
    let c = rand_t(&[3, 4], 2);
    let row = rand_t(&[4], 3);

    let k = c.clone();
    op(&mut out, "add", &x, move |v| v.add(&v.tape().constant(k.clone())));
    let k = row.clone();
    op(&mut out, "add_broadcast_rhs", &row, move |v| v.tape().constant(k.clone()).add(v)?.add(&v.tape().constant(c.clone())));
    let k = rand_t(&[3, 4], 4);
    op(&mut out, "sub", &x, move |v| v.tape().constant(k.clone()).sub(v)?.sub(&v.scale(0.5)));
    op(&mut out, "mul", &x, |v| v.mul(v)?.mul(v));
    let k = rand_t(&[3, 1], 5);
    op(&mut out, "mul_broadcast", &k, |v| v.mul(&v.tape().constant(rand_t(&[3, 4], 6))));
    op(&mut out, "scale", &x, |v| Ok(v.scale(-2.5)));
    op(&mut out, "add_scalar", &x, |v| Ok(v.add_scalar(0.7).mul(v)?));
    op(&mut out, "neg", &x, |v| Ok(v.neg()));
    op(&mut out, "sigmoid", &x.map(|v| 3.0 * v), |v| Ok(v.sigmoid()));
    op(&mut out, "gelu", &x.map(|v| 2.0 * v), |v| Ok(v.gelu()));
    op(&mut out, "leaky_relu", &away_from_zero(&[3, 4], 7), |v| Ok(v.leaky_relu(0.01)));
    op(&mut out, "sum", &x, |v| Ok(v.mul(v)?.sum()));
    op(&mut out, "mean", &x, |v| Ok(v.mul(v)?.mean()));

    let a = rand_t(&[2, 3, 4], 8);
    let b = rand_t(&[4, 5], 9);
    let k = b.clone();
    op(&mut out, "matmul_lhs", &a, move |v| v.matmul(&v.tape().constant(k.clone())));
    let k = a.clone();
    op(&mut out, "matmul_rhs_broadcast", &b, move |v| v.tape().constant(k.clone()).matmul(v));
    op(&mut out, "transpose_last", &a, |v| v.transpose_last());
    let (w, bias) = (rand_t(&[5, 4], 10), rand_t(&[5], 11));
    let (kw, kb) = (w.clone(), bias.clone());
    op(&mut out, "linear_input", &a, move |v| {
        let t = v.tape();
        v.linear(&t.constant(kw.clone()), Some(&t.constant(kb.clone())))
    });
    let (ka, kb) = (a.clone(), bias.clone());
    op(&mut out, "linear_weight", &w, move |v| {
        let t = v.tape();
        t.constant(ka.clone()).linear(v, Some(&t.constant(kb.clone())))
    });
    let (ka, kw) = (a.clone(), w.clone());
    op(&mut out, "linear_bias", &bias, move |v| {
        let t = v.tape();
        t.constant(ka.clone()).linear(&t.constant(kw.clone()), Some(v))
    });

    op(&mut out, "softmax_last", &a.map(|v| 2.0 * v), |v| v.softmax(2));
    op(&mut out, "softmax_middle", &a.map(|v| 2.0 * v), |v| v.softmax(1));
    let (g, be) = (rand_t(&[4], 12).map(|v| 1.0 + 0.5 * v), rand_t(&[4], 13));
    let (kg, kb) = (g.clone(), be.clone());
    op(&mut out, "layer_norm_input", &a, move |v| {
        let t = v.tape();
        v.layer_norm(Some(&t.constant(kg.clone())), Some(&t.constant(kb.clone())), 1e-5)
    });
    let (ka, kb) = (a.clone(), be.clone());
    op(&mut out, "layer_norm_gamma", &g, move |v| {
        let t = v.tape();
        t.constant(ka.clone()).layer_norm(Some(v), Some(&t.constant(kb.clone())), 1e-5)
    });
    let (ka, kg) = (a.clone(), g.clone());
    op(&mut out, "layer_norm_beta", &be, move |v| {
        let t = v.tape();
        t.constant(ka.clone()).layer_norm(Some(&t.constant(kg.clone())), Some(v), 1e-5)
    });
    let vol = rand_t(&[2, 3, 3, 2, 4], 14);
    op(&mut out, "instance_norm", &vol, |v| v.instance_norm(None, None, 1e-5));
    let (g3, b3) = (rand_t(&[3], 15).map(|v| 1.0 + 0.5 * v), rand_t(&[3], 16));
    let (kg, kb) = (g3.clone(), b3.clone());
    op(&mut out, "instance_norm_affine_input", &vol, move |v| {
        let t = v.tape();
        v.instance_norm(Some(&t.constant(kg.clone())), Some(&t.constant(kb.clone())), 1e-5)
    });
    let (kv, kb) = (vol.clone(), b3.clone());
    op(&mut out, "instance_norm_gamma", &g3, move |v| {
        let t = v.tape();
        t.constant(kv.clone()).instance_norm(Some(v), Some(&t.constant(kb.clone())), 1e-5)
    });
    let (kv, kg) = (vol.clone(), g3.clone());
    op(&mut out, "instance_norm_beta", &b3, move |v| {
        let t = v.tape();
        t.constant(kv.clone()).instance_norm(Some(&t.constant(kg.clone())), Some(v), 1e-5)
    });

    op(&mut out, "reshape", &a, |v| v.reshape(&[4, 6])?.mul(&v.tape().constant(rand_t(&[4, 6], 17))));
    op(&mut out, "permute", &vol, |v| v.permute(&[2, 0, 4, 1, 3]));
    op(&mut out, "roll", &vol, |v| v.roll(&[0, -1, 2, 1, -3]));
    op(&mut out, "pad", &a, |v| v.pad(&[(1, 0), (0, 2), (1, 1)]));
    op(&mut out, "slice", &vol, |v| v.slice(&[0..2, 1..3, 0..2, 1..2, 1..4]));
    op(&mut out, "narrow", &a, |v| v.narrow(2, 1, 2));
    let k = rand_t(&[2, 2, 4], 18);
    op(&mut out, "concat", &a, move |v| {
        let other = v.tape().constant(k.clone());
        Var::concat(&[v, &other, v], 1)
    });
    let idx = Arc::new(vec![2, 0, 0, 1, 2, 2]);
    op(&mut out, "index_rows", &x, move |v| v.index_rows(idx.clone()));

    let cx = rand_t(&[2, 2, 4, 3, 5], 19);
    let (cw, cb) = (rand_t(&[3, 2, 3, 3, 3], 20), rand_t(&[3], 21));
    let (kw, kb) = (cw.clone(), cb.clone());
    op(&mut out, "conv3d_input", &cx, move |v| {
        let t = v.tape();
        v.conv3d(&t.constant(kw.clone()), Some(&t.constant(kb.clone())), 1, 1)
    });
    let (kx, kb) = (cx.clone(), cb.clone());
    op(&mut out, "conv3d_weight", &cw, move |v| {
        let t = v.tape();
        t.constant(kx.clone()).conv3d(v, Some(&t.constant(kb.clone())), 1, 1)
    });
    let (kx, kw) = (cx.clone(), cw.clone());
    op(&mut out, "conv3d_bias", &cb, move |v| {
        let t = v.tape();
        t.constant(kx.clone()).conv3d(&t.constant(kw.clone()), Some(v), 1, 1)
    });
    let sx = rand_t(&[1, 2, 4, 4, 6], 22);
    let sw = rand_t(&[3, 2, 2, 2, 2], 23);
    let k = sw.clone();
    op(&mut out, "conv3d_stride2_input", &sx, move |v| v.conv3d(&v.tape().constant(k.clone()), None, 2, 0));
    let k = sx.clone();
    op(&mut out, "conv3d_stride2_weight", &sw, move |v| v.tape().constant(k.clone()).conv3d(v, None, 2, 0));
    let tx = rand_t(&[2, 3, 2, 1, 2], 24);
    let (tw, tb) = (rand_t(&[3, 2, 2, 2, 2], 25), rand_t(&[2], 26));
    let (kw, kb) = (tw.clone(), tb.clone());
    op(&mut out, "conv_transpose3d_input", &tx, move |v| {
        let t = v.tape();
        v.conv_transpose3d(&t.constant(kw.clone()), Some(&t.constant(kb.clone())), 2)
    });
    let (kx, kb) = (tx.clone(), tb.clone());
    op(&mut out, "conv_transpose3d_weight", &tw, move |v| {
        let t = v.tape();
        t.constant(kx.clone()).conv_transpose3d(v, Some(&t.constant(kb.clone())), 2)
    });
    let (kx, kw) = (tx.clone(), tw.clone());
    op(&mut out, "conv_transpose3d_bias", &tb, move |v| {
        let t = v.tape();
        t.constant(kx.clone()).conv_transpose3d(&t.constant(kw.clone()), Some(v), 2)
    });

    // 4 windows of 6 tokens, 2 heads of width 2; the mask splits each window
    let qkv = rand_t(&[4, 6, 12], 27).map(|v| 1.5 * v);
    let bias = rand_t(&[2, 6, 6], 28);
    let labels: Vec<u32> = vec![0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let mask = RegionMask::new(2, 6, labels).expect("sized");
    let (kb, km) = (bias.clone(), mask.clone());
    op(&mut out, "window_attention_qkv", &qkv, move |v| v.window_attention(&v.tape().constant(kb.clone()), 2, Some(&km)));
    let k = qkv.clone();
    op(&mut out, "window_attention_bias", &bias, move |v| v.tape().constant(k.clone()).window_attention(v, 2, Some(&mask)));
    let k = bias.clone();
    op(&mut out, "window_attention_unmasked", &qkv, move |v| v.window_attention(&v.tape().constant(k.clone()), 2, None));

    let probs = rand_t(&[2, 3, 3, 2, 2], 29).map(|v| 0.5 + 0.4 * v);
    let target = rand_t(&[2, 3, 3, 2, 2], 30).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let k = target.clone();
    op(&mut out, "soft_dice_loss", &probs, move |v| v.soft_dice_loss(&k, DICE_EPS));
    op(&mut out, "soft_dice_loss_no_eps", &probs, move |v| v.soft_dice_loss(&target, 0.0));

    let grid = rand_t(&[2, 5, 4, 3, 3], 31);
    op(&mut out, "window_partition_reverse", &grid, |v| {
        let (p, rec) = pad_to_window_multiple(v, [2, 2, 2])?;
        let s = cyclic_shift(&p, [1, 1, 1], false)?;
        let w = window_partition(&s, [2, 2, 2])?;
        let w = w.mul(&w)?;
        let r = window_reverse(&w, [2, 2, 2], rec.padded, 2)?;
        crop_padding(&cyclic_shift(&r, [1, 1, 1], true)?, &rec)
    });
    out
}

/// Loss head in f64 on top of the model's own-precision logits, so the
/// finite difference is not limited by rounding of the scalar itself.
fn scalar_loss<E: Element>(model: &SwinUnetr<E>, x: &Tensor<E>, target: &Tensor<f64>) -> Result<f64> {
    let logits = model.predict(x)?.cast::<f64>();
    let tape = Tape::no_grad();
    Ok(tape.constant(logits).sigmoid().soft_dice_loss(target, DICE_EPS)?.value().item())
}

/// End-to-end check on the tiny model with a 4 x 16^3 synthetic case and
/// the sigmoid soft-Dice loss. In f64 each parameter tensor is stepped
/// along its own unit gradient direction `u`, in f32 all parameters move
/// together along the full one; the central difference must match the
/// analytic directional derivative `|g|`. Returns the largest relative
/// error.
pub fn model_gradcheck<E: Element>(tol: f64) -> CheckResult {
    let eps = match E::DTYPE {
        DType::F64 => 1e-4,
        DType::F32 => 3e-4,
    };
    model_gradcheck_with::<E>(eps, tol)
}

pub fn model_gradcheck_with<E: Element>(eps: f64, tol: f64) -> CheckResult {
    let name = format!("tiny_model_{}", E::DTYPE.name());
    let r = (|| -> Result<(f64, String, usize, f64)> {
        let synth = SynthConfig { shape: [16; 3], ..SynthConfig::default() };
        let (vol, mask) = synth_case(&synth, 0)?;
        let x: Tensor<E> = normalize_nonzero(&vol)?.to_tensor();
        let target: Tensor<E> = mask.to_target()?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = SwinUnetr::<E>::new(ModelConfig::tiny(), &mut rng)?;
        // zero biases leave every padded token at exactly zero channel
        // variance, the singular point of layer norm; move off it
        let noise = Normal::new(0.0, 0.02).expect("finite std");
        for p in model.params_mut().iter_mut().filter(|p| p.name().ends_with(".bias")) {
            p.value_mut().data_mut().iter_mut().for_each(|v| *v = E::from_f64(noise.sample(&mut rng)));
        }

        let tape = Tape::new();
        let loss = model.forward(&tape.constant(x.clone()))?.sigmoid().soft_dice_loss(&target, DICE_EPS)?;
        tape.backward(&loss)?;
        let names: Vec<String> = model.params().iter().map(|p| p.name().to_string()).collect();
        let grads: Vec<Option<Tensor<E>>> = names.iter().map(|n| tape.take_param_grad(n)).collect();
        drop(loss);
        drop(tape);

        let target64 = target.cast::<f64>();
        let (_, branches) = record_branches(|| scalar_loss(&model, &x, &target64));
        let live: Vec<(usize, &Tensor<E>)> = grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g))).collect();
        // f32 cannot resolve the tiny directional derivative of a single
        // small tensor, so it steps every parameter at once along the full gradient
        let groups: Vec<Vec<(usize, &Tensor<E>)>> = match E::DTYPE {
            DType::F64 => live.iter().map(|&t| vec![t]).collect(),
            DType::F32 => vec![live.clone()],
        };
        let (mut worst, mut worst_name, mut checked, mut free_worst) = (0.0f64, String::new(), 0, 0.0f64);
        for group in &groups {
            let norm = group.iter().flat_map(|(_, g)| g.data().iter()).map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let origs: Vec<Tensor<E>> = group.iter().map(|&(i, _)| model.params().get(ParamId(i)).value().clone()).collect();
            let step = |sign: f64| -> Vec<Tensor<E>> {
                origs
                    .iter()
                    .zip(group)
                    .map(|(o, (_, g))| o.zip_map(g, |w, gv| E::from_f64(w.to_f64() + sign * eps * gv.to_f64() / norm)).expect("same shape"))
                    .collect()
            };
            let (hi, lo) = (step(1.0), step(-1.0));
            // the step actually taken after rounding to E, projected on g
            let taken: f64 = hi
                .iter()
                .zip(&lo)
                .zip(group)
                .map(|((h, l), (_, g))| h.data().iter().zip(l.data()).zip(g.data()).map(|((a, b), gv)| (a.to_f64() - b.to_f64()) * gv.to_f64()).sum::<f64>())
                .sum::<f64>()
                / norm;
            let mut eval = |vs: &[Tensor<E>], frozen: bool| -> Result<f64> {
                for (v, &(i, _)) in vs.iter().zip(group) {
                    model.params_mut().get_mut(ParamId(i)).set_value(v.clone())?;
                }
                if frozen {
                    replay_branches(&branches, || scalar_loss(&model, &x, &target64))?
                } else {
                    scalar_loss(&model, &x, &target64)
                }
            };
            let numeric = (eval(&hi, true)? - eval(&lo, true)?) / taken;
            let free = (eval(&hi, false)? - eval(&lo, false)?) / taken;
            eval(&origs, false)?;
            let err = relative_error(norm, numeric, 1e-8);
            free_worst = free_worst.max(relative_error(norm, free, 1e-8));
            checked += group.len();
            if err > worst {
                worst = err;
                worst_name = if group.len() == 1 { names[group[0].0].clone() } else { "all parameters".into() };
            }
        }
        Ok((worst, worst_name, checked, free_worst))
    })();
    match r {
        Ok((w, n, c, free)) => CheckResult::below(SUITE, name, Ok(w), tol)
            .with_detail(format!("{c} tensors, eps {eps:e}, worst {n}; {free:.1e} with activation kinks free")),
        Err(e) => CheckResult::below(SUITE, name, Err(e), tol),
    }
}
