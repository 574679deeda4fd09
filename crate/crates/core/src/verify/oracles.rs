//! Checks against independent reference computations and hand values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{randomize_params, reference, CheckResult, Faults};
use crate::error::Result;
use crate::inference::{ensemble_infer, plan_tiles, sliding_window_infer, BlendMode, SlidingWindowPlan, TileModel};
use crate::metrics::{dice_score, hausdorff_distance};
use crate::model::{count_parameters, ModelConfig, SwinUnetr};
use crate::tensor::{Element, Tape, Tensor};
use crate::train::lr_at;
use crate::volume::Volume;
use crate::windowing::{compute_shift_mask, WindowConfig};

pub const ORACLE_TOL: f64 = 1e-5;

const SUITE: &str = "oracles";

fn rand_t<E: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    Tensor::from_fn(shape.to_vec(), |_| E::from_f64(rng.random_range(-1.0..1.0)))
}

/// Embed 8, heads of width 4 in the first stage.
fn oracle_config(m: usize, bias: bool) -> ModelConfig {
    ModelConfig { embed_dim: 8, heads: vec![2, 2, 4, 8], window_size: m, use_relative_position_bias: bias, ..ModelConfig::tiny() }
}

fn random_model(cfg: ModelConfig, seed: u64) -> Result<SwinUnetr<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SwinUnetr::new(cfg, &mut rng)?;
    randomize_params(&mut m, 0.3, &mut rng);
    Ok(m)
}

/// Window attention on a grid of exactly one window against dense full
/// self-attention, float32, `draws` random parameter sets per window size.
pub fn wmsa_oracle(draws: usize) -> Vec<CheckResult> {
    [2, 3, 4]
        .into_iter()
        .map(|m| {
            let err = (|| -> Result<f64> {
                let mut worst = 0.0f64;
                for d in 0..draws as u64 {
                    let model = random_model(oracle_config(m, false), 1000 * m as u64 + d)?;
                    let h: Tensor<f32> = rand_t(&[1, m, m, m, 8], &mut ChaCha8Rng::seed_from_u64(d));
                    let wc = WindowConfig::new([m; 3], m, false)?;
                    let tape = Tape::no_grad();
                    let got = model.window_msa(&tape.constant(h.clone()), 0, 0, &wc)?;
                    let want = reference::dense_attention(&model.cast(), 0, 0, &h.cast())?;
                    worst = worst.max(got.value().cast::<f64>().max_abs_diff(&want));
                }
                Ok(worst)
            })();
            CheckResult::below(SUITE, format!("wmsa_dense_m{m}"), err, ORACLE_TOL).with_detail(format!("{draws} draws, f32"))
        })
        .collect()
}

/// Grids up to 6^3 (several padded) plus one 7^3 grid with M = 7.
pub const SWMSA_CASES: [([usize; 3], usize); 8] = [
    ([4, 4, 4], 4),
    ([4, 4, 4], 2),
    ([6, 6, 6], 3),
    ([6, 4, 2], 2),
    ([5, 6, 3], 4),
    ([3, 5, 6], 2),
    ([5, 5, 5], 3),
    ([7, 7, 7], 7),
];

/// Shifted-window blocks (shift, mask, padding) against explicit
/// region-gather attention, float32.
pub fn swmsa_oracle(faults: &Faults) -> Vec<CheckResult> {
    SWMSA_CASES
        .iter()
        .enumerate()
        .map(|(i, &(grid, m))| {
            let name = format!("swmsa_gather_{}x{}x{}_m{m}", grid[0], grid[1], grid[2]);
            let err = (|| -> Result<f64> {
                let model = random_model(oracle_config(m, true), 17 + i as u64)?;
                let z: Tensor<f32> = rand_t(&[1, grid[0], grid[1], grid[2], 8], &mut ChaCha8Rng::seed_from_u64(100 + i as u64));
                let wc = WindowConfig::new(grid, m, true)?;
                let used = match faults.swmsa_shift {
                    Some(s) => {
                        let shift = [0, 1, 2].map(|a| if wc.shift[a] > 0 { s.min(wc.window[a] - 1) } else { 0 });
                        WindowConfig::explicit(grid, wc.window, shift)?
                    }
                    None => wc,
                };
                let tape = Tape::no_grad();
                let got = model.swin_block_with(&tape.constant(z.clone()), 0, 1, &used)?;
                let want = reference::swin_block(&model.cast(), 0, 1, &z.cast(), &wc)?;
                Ok(got.value().cast::<f64>().max_abs_diff(&want))
            })();
            let padded = WindowConfig::new(grid, m, true).map(|w| w.is_padded()).unwrap_or(false);
            CheckResult::below(SUITE, name, err, ORACLE_TOL).with_detail(if padded { "padded" } else { "" })
        })
        .collect()
}

/// Dense shift mask against the wrap-flag rule.
pub fn shift_mask_checks() -> Vec<CheckResult> {
    let cases = [([4, 4, 4], [2, 2, 2], [1, 1, 1]), ([6, 4, 8], [3, 2, 4], [1, 1, 2]), ([6, 6, 6], [3, 3, 3], [1, 0, 1]), ([7, 7, 7], [7, 7, 7], [3, 3, 3])];
    cases
        .iter()
        .map(|&(g, w, s)| {
            let ok = compute_shift_mask::<f64>(g, w, s).map(|m| m.data() == reference::shift_mask(g, w, s).data());
            CheckResult::flag(SUITE, format!("shift_mask_{}x{}x{}_w{}{}{}_s{}{}{}", g[0], g[1], g[2], w[0], w[1], w[2], s[0], s[1], s[2]), ok)
        })
        .collect()
}

fn soft_dice(y: &[f64], g: &[f64], shape: Vec<usize>, eps: f64) -> Result<f64> {
    let tape = Tape::no_grad();
    let y = tape.constant(Tensor::new(shape.clone(), y.to_vec())?);
    Ok(y.soft_dice_loss(&Tensor::new(shape, g.to_vec())?, eps)?.value().item())
}

/// Soft Dice loss and Dice score on hand-evaluated inputs.
pub fn dice_checks() -> Vec<CheckResult> {
    let eps = crate::metrics::DICE_EPS;
    let g: Vec<f64> = (0..24).map(|i| if (i * 5) % 7 < 3 { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
    let shape = vec![1, 3, 2, 2, 2];
    let mut out = vec![
        CheckResult::at_most(SUITE, "soft_dice_equal", soft_dice(&g, &g, shape.clone(), eps), 1e-5),
        CheckResult::at_most(SUITE, "soft_dice_disjoint", soft_dice(&inv, &g, shape, eps).map(|l| (l - 1.0).abs()), 1e-5),
        CheckResult::at_most(SUITE, "soft_dice_third", soft_dice(&[0.5, 0.5], &[1.0, 0.0], vec![1, 1, 2], 0.0).map(|l| (l - 1.0 / 3.0).abs()), 1e-12),
    ];
    let p: Vec<bool> = (0..64).map(|i| i < 8).collect();
    let q: Vec<bool> = (0..64).map(|i| (4..12).contains(&i)).collect();
    let far: Vec<bool> = (0..64).map(|i| i >= 56).collect();
    out.push(CheckResult::at_most(SUITE, "dice_score_equal", dice_score(&p, &p).map(|d| (d - 1.0).abs()), 0.0));
    out.push(CheckResult::at_most(SUITE, "dice_score_disjoint", dice_score(&p, &far), 0.0));
    out.push(CheckResult::at_most(SUITE, "dice_score_half", dice_score(&p, &q).map(|d| (d - 0.5).abs()), 0.0));
    out
}

/// Distance transform Hausdorff against exhaustive pairwise distances.
pub fn hausdorff_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let single = |s: [usize; 3], at: [usize; 3]| -> Vec<bool> {
        (0..s.iter().product()).map(|i| i == (at[0] * s[1] + at[1]) * s[2] + at[2]).collect()
    };
    let s = [6, 3, 3];
    let hd = hausdorff_distance(&single(s, [1, 1, 1]), &single(s, [4, 1, 1]), s, [1.0; 3], 100.0);
    out.push(CheckResult::at_most(SUITE, "hausdorff_single_voxels", hd.map(|d| (d.unwrap_or(f64::NAN) - 3.0).abs()), 0.0));
    let cube = |o: usize| -> Vec<bool> {
        (0..216).map(|i| {
            let c = [i / 36, (i / 6) % 6, i % 6];
            (o + 1..o + 3).contains(&c[0]) && (1..3).contains(&c[1]) && (1..3).contains(&c[2])
        })
        .collect()
    };
    let hd = hausdorff_distance(&cube(0), &cube(1), [6; 3], [1.0; 3], 100.0);
    out.push(CheckResult::at_most(SUITE, "hausdorff_cube_offset", hd.map(|d| (d.unwrap_or(f64::NAN) - 1.0).abs()), 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0usize;
    let mut trials = 0usize;
    let mut err = None;
    for _ in 0..60 {
        let s = [0, 1, 2].map(|_| rng.random_range(1..=6usize));
        let n: usize = s.iter().product();
        let density = rng.random_range(0.05..0.7);
        let a: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let sp = [0, 1, 2].map(|_| [1.0, 0.5, 1.25, 2.0][rng.random_range(0..4)]);
        for pct in [100.0, 95.0, 50.0] {
            trials += 1;
            match hausdorff_distance(&a, &b, s, sp, pct) {
                Ok(got) => {
                    let want = reference::hausdorff_exhaustive(&a, &b, s, sp, pct);
                    if got.map(f64::to_bits) != want.map(f64::to_bits) {
                        mismatches += 1;
                    }
                }
                Err(e) => err = Some(e),
            }
        }
    }
    let r = match err {
        Some(e) => Err(e),
        None => Ok(mismatches as f64),
    };
    out.push(CheckResult::at_most(SUITE, "hausdorff_exhaustive", r, 0.0).with_detail(format!("{trials} mask pairs up to 6^3, bit-exact")));
    out
}

struct Constant(f32);

impl TileModel for Constant {
    fn out_channels(&self) -> usize {
        3
    }
    fn logits(&self, tile: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = tile.shape();
        Ok(Tensor::full(vec![1, 3, s[2], s[3], s[4]], self.0))
    }
}

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut v = Volume::zeros(4, shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    v
}

fn tiny_model(seed: u64) -> Result<SwinUnetr<f32>> {
    SwinUnetr::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Tile plan landmarks, single-tile equivalence and constant models.
pub fn sliding_window_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let plan = plan_tiles([240; 3], [128; 3], 0.7).map(|t| {
        let xs: Vec<usize> = t.iter().filter(|o| o[1] == 0 && o[2] == 0).map(|o| o[0]).collect();
        xs == [0, 38, 76, 112] && t.len() == 64
    });
    out.push(CheckResult::flag(SUITE, "tile_plan_240_128_0.7", plan));

    let single = (|| -> Result<f64> {
        let model = tiny_model(3)?;
        let v = random_volume([32; 3], 4);
        let plan = SlidingWindowPlan { roi: [32; 3], ..Default::default() };
        let p = sliding_window_infer(&v, &model, &plan)?;
        let tape = Tape::no_grad();
        let direct = tape.constant(model.predict(&v.to_tensor())?).sigmoid().into_value();
        Ok(p.max_abs_diff(&direct.reshaped(vec![3, 32, 32, 32])?))
    })();
    out.push(CheckResult::below(SUITE, "single_tile_equals_forward", single, 1e-6));

    for blend in [BlendMode::Uniform, BlendMode::Gaussian] {
        let r = (|| -> Result<f64> {
            let v = random_volume([40, 37, 20], 1);
            let plan = SlidingWindowPlan { roi: [16; 3], overlap: 0.7, blend };
            let p = sliding_window_infer(&v, &Constant(0.3), &plan)?;
            let first = p.data()[0];
            Ok(p.data().iter().map(|&x| (x - first).abs() as f64).fold(0.0, f64::max))
        })();
        out.push(CheckResult::at_most(SUITE, format!("constant_model_{blend:?}").to_lowercase(), r, 1e-7));
    }
    out
}

/// Duplicated members reproduce the single model; two constants average.
pub fn ensemble_checks() -> Vec<CheckResult> {
    let copies = (|| -> Result<f64> {
        let model = tiny_model(6)?;
        let v = random_volume([32, 32, 40], 7);
        let plan = SlidingWindowPlan { roi: [32; 3], overlap: 0.5, ..Default::default() };
        let single = sliding_window_infer(&v, &model, &plan)?;
        let members: Vec<(String, &dyn TileModel)> = (0..3).map(|i| (format!("m{i}"), &model as &dyn TileModel)).collect();
        let ens = ensemble_infer(&v, &members, &plan)?;
        Ok(ens.data().iter().zip(single.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count() as f64)
    })();
    let pair = (|| -> Result<f64> {
        let v = random_volume([8; 3], 8);
        let plan = SlidingWindowPlan { roi: [8; 3], ..Default::default() };
        let logit = |p: f32| (p / (1.0 - p)).ln();
        let (a, b) = (Constant(logit(0.2)), Constant(logit(0.6)));
        let pa = sliding_window_infer(&v, &a, &plan)?.data()[0];
        let pb = sliding_window_infer(&v, &b, &plan)?.data()[0];
        let ens = ensemble_infer(&v, &[("a".into(), &a), ("b".into(), &b)], &plan)?;
        let want = ((pa as f64 + pb as f64) / 2.0) as f32;
        Ok(ens.data().iter().filter(|&&x| x != want).count() as f64)
    })();
    vec![
        CheckResult::at_most(SUITE, "ensemble_duplicates_exact", copies, 0.0),
        CheckResult::at_most(SUITE, "ensemble_two_constants_exact", pair, 0.0),
    ]
}

/// Warmup-cosine landmarks at the default peak rate.
pub fn schedule_checks() -> Vec<CheckResult> {
    let (total, warm, lr) = (1000, 50, 8e-4);
    let mid = warm + (total - warm) / 2;
    let left = crate::train::lr_at_time(warm as f64 - 1e-9, total as f64, warm as f64, lr);
    vec![
        CheckResult::at_most(SUITE, "lr_end_of_warmup", Ok((lr_at(warm, total, warm, lr) - 0.0008).abs()), 1e-15),
        CheckResult::at_most(SUITE, "lr_at_total", Ok(lr_at(total, total, warm, lr).abs()), 0.0),
        CheckResult::at_most(SUITE, "lr_cosine_midpoint", Ok((lr_at(mid, total, warm, lr) - 0.0004).abs()), 1e-15),
        CheckResult::at_most(SUITE, "lr_continuous_at_warmup", Ok((left - lr_at(warm, total, warm, lr)).abs()), 1e-12),
    ]
}

/// Default configuration parameter count against the published 61.98M.
pub fn param_count_check() -> CheckResult {
    let n = count_parameters(&ModelConfig::default()) as f64;
    CheckResult::below(SUITE, "default_param_count", Ok((n / 61.98e6 - 1.0).abs()), 0.01).with_detail(format!("{n} parameters"))
}
