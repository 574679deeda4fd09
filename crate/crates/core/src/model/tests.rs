
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_difference_check, GradCheckConfig, RegionMask};
use crate::verify::{randomize_params, reference, zero_params};

fn rand_t<E: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    Tensor::from_fn(shape.to_vec(), |_| E::from_f64(rng.random_range(-1.0..1.0)))
}

fn small(m: usize, bias: bool) -> ModelConfig {
    ModelConfig { embed_dim: 8, heads: vec![2, 2, 4, 8], window_size: m, use_relative_position_bias: bias, ..ModelConfig::tiny() }
}

fn random_model<E: Element>(cfg: ModelConfig, seed: u64) -> SwinUnetr<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SwinUnetr::new(cfg, &mut rng).unwrap();
    randomize_params(&mut m, 0.3, &mut rng);
    m
}

#[test]
fn tiny_shape_contract() {
    let cfg = ModelConfig::tiny();
    let model = SwinUnetr::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x: Tensor<f32> = rand_t(&[1, 4, 32, 32, 32], &mut ChaCha8Rng::seed_from_u64(1));
    let tape = Tape::no_grad();
    let levels = model.encode(&tape.constant(x.clone())).unwrap().levels;
    let expect = level_shapes(&cfg, [32; 3]);
    assert_eq!(levels.len(), expect.len());
    for (l, (c, g)) in levels.iter().zip(&expect) {
        assert_eq!(l.shape(), &[1, *c, g[0], g[1], g[2]]);
    }
    assert_eq!(expect.last().unwrap(), &(96, [1, 1, 1]));
    let y = model.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 32, 32, 32]);
    assert!(y.all_finite());
}

#[test]
fn non_divisible_input_is_cropped_back() {
    let model = SwinUnetr::<f32>::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x: Tensor<f32> = rand_t(&[1, 4, 20, 16, 9], &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(model.predict(&x).unwrap().shape(), &[1, 3, 20, 16, 9]);
}

#[test]
fn deterministic_forward() {
    let model = random_model::<f32>(ModelConfig::tiny(), 3);
    let x: Tensor<f32> = rand_t(&[1, 4, 32, 32, 32], &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(model.predict(&x).unwrap().data(), model.predict(&x).unwrap().data());
}

#[test]
fn zero_params_give_zero_logits() {
    let mut model = SwinUnetr::<f32>::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    zero_params(&mut model);
    let x: Tensor<f32> = rand_t(&[1, 4, 32, 32, 32], &mut ChaCha8Rng::seed_from_u64(1));
    let y = model.predict(&x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let tape = Tape::no_grad();
    let p = tape.constant(y).sigmoid();
    assert!(p.value().data().iter().all(|&v| v == 0.5));
}

fn zero_block(model: &mut SwinUnetr<f64>, stage: usize, block: usize) {
    let pre = block_prefix(stage, block);
    for p in model.params_mut().iter_mut() {
        if p.name().starts_with(&pre) && (p.name().contains(".attn.") || p.name().contains(".mlp.")) {
            let s = p.value().shape().to_vec();
            p.set_value(Tensor::zeros(s)).unwrap();
        }
    }
}

#[test]
fn zeroed_block_is_identity() {
    for bias in [false, true] {
        let mut model = random_model::<f64>(small(2, bias), 4);
        zero_block(&mut model, 0, 1);
        let z: Tensor<f64> = rand_t(&[2, 3, 4, 5, 8], &mut ChaCha8Rng::seed_from_u64(5));
        let tape = Tape::no_grad();
        let y = model.swin_block(&tape.constant(z.clone()), 0, 1).unwrap();
        assert!(y.value().max_abs_diff(&z) < 1e-6);
    }
}

#[test]
fn zero_shift_reduces_to_unshifted_block() {
    let model = random_model::<f64>(small(2, true), 6);
    let z: Tensor<f64> = rand_t(&[1, 4, 4, 6, 8], &mut ChaCha8Rng::seed_from_u64(7));
    let tape = Tape::no_grad();
    let zv = tape.constant(z);
    let w = WindowConfig::new([4, 4, 6], 2, false).unwrap();
    let s0 = WindowConfig::explicit([4, 4, 6], [2, 2, 2], [0, 0, 0]).unwrap();
    let a = model.swin_block_with(&zv, 0, 1, &w).unwrap();
    let b = model.swin_block_with(&zv, 0, 1, &s0).unwrap();
    assert!(a.value().max_abs_diff(b.value()) < 1e-6);
}

#[test]
fn one_token_windows_return_projected_values() {
    let model = random_model::<f64>(small(2, true), 8);
    let h: Tensor<f64> = rand_t(&[1, 2, 3, 2, 8], &mut ChaCha8Rng::seed_from_u64(9));
    let tape = Tape::no_grad();
    let hv = tape.constant(h);
    let wc = WindowConfig::explicit([2, 3, 2], [1, 1, 1], [0, 0, 0]).unwrap();
    let a = model.window_msa(&hv, 0, 0, &wc).unwrap();
    let pre = block_prefix(0, 0);
    let qkv = model.linear(&hv, &format!("{pre}.attn.qkv")).unwrap();
    let v = qkv.narrow(4, 16, 8).unwrap();
    let expect = model.linear(&v, &format!("{pre}.attn.proj")).unwrap();
    assert!(a.value().max_abs_diff(expect.value()) < 1e-12);
}

#[test]
fn saturated_mask_attends_to_self() {
    let tape = Tape::<f64>::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let qkv = tape.constant(rand_t(&[2, 5, 12], &mut rng));
    let bias = tape.constant(rand_t(&[2, 5, 5], &mut rng));
    let mask = RegionMask::new(1, 5, (0..5).collect()).unwrap();
    let y = qkv.window_attention(&bias, 2, Some(&mask)).unwrap();
    let v = qkv.narrow(2, 8, 4).unwrap();
    assert!(y.value().max_abs_diff(v.value()) < 1e-12);
}

#[test]
fn unshifted_block_commutes_with_window_translation() {
    for bias in [false, true] {
        let model = random_model::<f64>(small(2, bias), 11);
        let z: Tensor<f64> = rand_t(&[1, 4, 6, 4, 8], &mut ChaCha8Rng::seed_from_u64(12));
        let tape = Tape::no_grad();
        let zv = tape.constant(z);
        for shift in [[2, 0, 0], [0, 4, 2], [2, 2, 2]] {
            let rolled = zv.roll(&[0, shift[0], shift[1], shift[2], 0]).unwrap();
            let a = model.swin_block(&rolled, 0, 0).unwrap();
            let b = model.swin_block(&zv, 0, 0).unwrap().roll(&[0, shift[0], shift[1], shift[2], 0]).unwrap();
            assert!(a.value().max_abs_diff(b.value()) < 1e-12);
        }
        // Off-window translations generally do not commute.
        let rolled = zv.roll(&[0, 1, 0, 0, 0]).unwrap();
        let a = model.swin_block(&rolled, 0, 0).unwrap();
        let b = model.swin_block(&zv, 0, 0).unwrap().roll(&[0, 1, 0, 0, 0]).unwrap();
        assert!(a.value().max_abs_diff(b.value()) > 1e-6);
    }
}

#[test]
fn single_window_matches_dense_attention() {
    for m in [2, 3, 4] {
        let cfg = small(m, false);
        let model = random_model::<f32>(cfg, 13 + m as u64);
        let h: Tensor<f32> = rand_t(&[1, m, m, m, 8], &mut ChaCha8Rng::seed_from_u64(m as u64));
        let tape = Tape::no_grad();
        let wc = WindowConfig::new([m; 3], m, false).unwrap();
        let got = model.window_msa(&tape.constant(h.clone()), 0, 0, &wc).unwrap();
        let want = reference::dense_attention(&model.cast(), 0, 0, &h.cast()).unwrap();
        assert!(got.value().cast::<f64>().max_abs_diff(&want) < 1e-5);
    }
}

#[test]
fn shifted_block_matches_gathered_reference() {
    for (grid, m) in [([4, 4, 4], 4), ([4, 4, 4], 2), ([5, 6, 3], 4), ([6, 6, 6], 3), ([3, 5, 6], 2)] {
        let model = random_model::<f32>(small(m, true), 17);
        let z: Tensor<f32> = rand_t(&[1, grid[0], grid[1], grid[2], 8], &mut ChaCha8Rng::seed_from_u64(18));
        let tape = Tape::no_grad();
        let wc = WindowConfig::new(grid, m, true).unwrap();
        let got = model.swin_block_with(&tape.constant(z.clone()), 0, 1, &wc).unwrap();
        let want = reference::swin_block(&model.cast(), 0, 1, &z.cast(), &wc).unwrap();
        let err = got.value().cast::<f64>().max_abs_diff(&want);
        assert!(err < 1e-5, "grid {grid:?} m {m}: {err}");
    }
}

#[test]
fn wrong_shift_is_detected_by_reference() {
    let model = random_model::<f64>(small(7, true), 19);
    let z: Tensor<f64> = rand_t(&[1, 7, 7, 7, 8], &mut ChaCha8Rng::seed_from_u64(20));
    let tape = Tape::no_grad();
    let good = WindowConfig::new([7; 3], 7, true).unwrap();
    assert_eq!(good.shift, [3; 3]);
    let bad = WindowConfig::explicit([7; 3], [7; 3], [1; 3]).unwrap();
    let want = reference::swin_block(&model, 0, 1, &z, &good).unwrap();
    let ok = model.swin_block_with(&tape.constant(z.clone()), 0, 1, &good).unwrap();
    let wrong = model.swin_block_with(&tape.constant(z), 0, 1, &bad).unwrap();
    assert!(ok.value().max_abs_diff(&want) < 1e-10);
    assert!(wrong.value().max_abs_diff(&want) > 1e-3);
}

#[test]
fn patch_embed_matches_gather_linear() {
    let cfg = ModelConfig { embed_dim: 6, ..ModelConfig::tiny() };
    let model = random_model::<f32>(cfg, 21);
    let (h, w, d) = (6, 4, 8);
    let x: Tensor<f32> = rand_t(&[1, 4, h, w, d], &mut ChaCha8Rng::seed_from_u64(22));
    let tape = Tape::no_grad();
    let got = model.patch_embed(&tape.constant(x.clone())).unwrap();
    assert_eq!(got.shape(), &[1, 3, 2, 4, 6]);
    let wt = model.params().by_name("encoder.patch_embed.weight").unwrap().value().clone();
    let bt = model.params().by_name("encoder.patch_embed.bias").unwrap().value().clone();
    let mut patches = Vec::new();
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for k in 0..d / 2 {
                for s in 0..4 {
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                patches.push(x.at(&[0, s, 2 * i + a, 2 * j + b, 2 * k + c]));
                            }
                        }
                    }
                }
            }
        }
    }
    let p = tape.constant(Tensor::new(vec![h / 2 * w / 2 * d / 2, 32], patches).unwrap());
    let wv = tape.constant(wt.reshaped(vec![6, 32]).unwrap());
    let want = p.linear(&wv, Some(&tape.constant(bt))).unwrap();
    assert!(got.value().clone().reshaped(vec![24, 6]).unwrap().max_abs_diff(want.value()) < 1e-5);
}

#[test]
fn patch_merge_sees_exactly_its_children() {
    let model = random_model::<f64>(small(2, true), 23);
    let z: Tensor<f64> = rand_t(&[1, 4, 4, 2, 8], &mut ChaCha8Rng::seed_from_u64(24));
    for out in 0..8 {
        let tape = Tape::new();
        let zv = tape.variable(z.clone());
        let y = model.patch_merge(&zv, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1, 16]);
        let sel = Tensor::from_fn(vec![1, 2, 2, 1, 16], |i| if i / 16 == out { 1.0 } else { 0.0 });
        let loss = y.mul(&tape.constant(sel)).unwrap().sum();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&zv).unwrap();
        let (oh, ow) = (out / 2, out % 2);
        for x in 0..4 {
            for yy in 0..4 {
                for zz in 0..2 {
                    let child = x / 2 == oh && yy / 2 == ow;
                    let touched = (0..8).any(|c| g.at(&[0, x, yy, zz, c]) != 0.0);
                    assert_eq!(child, touched, "output {out}, input ({x},{yy},{zz})");
                }
            }
        }
    }
}

#[test]
fn merge_halves_grid_and_doubles_width() {
    let model = SwinUnetr::<f32>::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::no_grad();
    let z = tape.constant(rand_t(&[1, 8, 8, 8, 48], &mut ChaCha8Rng::seed_from_u64(1)));
    assert_eq!(model.patch_merge(&z, 0).unwrap().shape(), &[1, 4, 4, 4, 96]);
}

#[test]
fn residual_block_zero_convs_leave_skip_path() {
    let cfg = ModelConfig { in_channels: 2, embed_dim: 4, ..ModelConfig::tiny() };
    let mut model = random_model::<f64>(cfg, 25);
    for p in model.params_mut().iter_mut() {
        if p.name().starts_with("decoder.enc0.conv") {
            let s = p.value().shape().to_vec();
            p.set_value(Tensor::zeros(s)).unwrap();
        }
    }
    let x: Tensor<f64> = rand_t(&[1, 2, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(26));
    let tape = Tape::no_grad();
    let xv = tape.constant(x);
    let y = model.residual_block(&xv, "decoder.enc0").unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 4, 4]);
    let skip = model
        .conv(&xv, "decoder.enc0.proj", 0)
        .unwrap()
        .instance_norm(None, None, NORM_EPS)
        .unwrap()
        .leaky_relu(LEAKY_SLOPE);
    assert!(y.value().max_abs_diff(skip.value()) < 1e-12);
}

#[test]
fn residual_block_gradcheck() {
    let cfg = ModelConfig { in_channels: 2, embed_dim: 4, ..ModelConfig::tiny() };
    let model = random_model::<f64>(cfg, 27);
    let x: Tensor<f64> = rand_t(&[1, 2, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(28));
    let w: Tensor<f64> = rand_t(&[1, 4, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(29));
    let cfg = GradCheckConfig { coords: Some((0..128).step_by(5).collect()), ..GradCheckConfig::default() };
    let err = finite_difference_check(&x, &cfg, |xv| {
        let y = model.residual_block(xv, "decoder.enc0")?;
        Ok(y.mul(&xv.tape().constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn relative_index_covers_table() {
    let idx = relative_position_index([3, 3, 3], 3);
    assert_eq!(idx.len(), 27 * 27);
    assert_eq!(idx.iter().max(), Some(&124));
    assert_eq!(idx[0], 62);
    let clamped = relative_position_index([2, 1, 3], 7);
    assert!(clamped.iter().all(|&i| i < 13 * 13 * 13));
}

