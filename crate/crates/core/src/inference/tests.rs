use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::tensor::Tape;
use crate::volume::labels_to_channels;

/// Emits one logit everywhere.
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

/// Logit equal to the first voxel of channel 0, which encodes the tile origin.
struct OriginProbe;

impl TileModel for OriginProbe {
    fn out_channels(&self) -> usize {
        3
    }
    fn logits(&self, tile: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = tile.shape();
        Ok(Tensor::full(vec![1, 3, s[2], s[3], s[4]], tile.data()[0]))
    }
}

fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Volume::zeros(4, shape);
    v.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    v
}

#[test]
fn brats_extent_plan() {
    let o = plan_tiles([240, 240, 155], [128; 3], 0.7).unwrap();
    let xs: Vec<usize> = o.iter().filter(|p| p[1] == 0 && p[2] == 0).map(|p| p[0]).collect();
    assert_eq!(xs, vec![0, 38, 76, 112]);
    let zs: Vec<usize> = o.iter().filter(|p| p[0] == 0 && p[1] == 0).map(|p| p[2]).collect();
    assert_eq!(zs, vec![0, 27]);
    assert_eq!(o.len(), 4 * 4 * 2);
    let mut sorted = o.clone();
    sorted.sort();
    assert_eq!(sorted, o);
}

#[test]
fn single_tile_plan() {
    assert_eq!(plan_tiles([32, 16, 8], [32, 16, 8], 0.7).unwrap(), vec![[0, 0, 0]]);
}

#[test]
fn invalid_plans() {
    assert!(plan_tiles([32; 3], [16; 3], 1.0).is_err());
    assert!(plan_tiles([32; 3], [16; 3], 0.9995).is_err());
    assert!(plan_tiles([32; 3], [16; 3], -0.1).is_err());
    assert!(plan_tiles([8, 32, 32], [16; 3], 0.5).is_err());
    plan_tiles([32; 3], [16; 3], 0.998).unwrap();
}

proptest! {
    #[test]
    fn plans_cover_every_voxel(ext in prop::array::uniform3(1usize..40), frac in prop::array::uniform3(0.05f64..1.0), overlap in 0.0f64..0.99) {
        let roi = [0, 1, 2].map(|a| ((ext[a] as f64 * frac[a]).ceil() as usize).clamp(1, ext[a]));
        let tiles = plan_tiles(ext, roi, overlap).unwrap();
        for a in 0..3 {
            let mut covered = vec![false; ext[a]];
            for t in &tiles {
                prop_assert!(t[a] + roi[a] <= ext[a]);
                covered[t[a]..t[a] + roi[a]].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}

#[test]
fn constant_model_gives_constant_probabilities() {
    let v = random_volume([40, 37, 20], 1);
    for blend in [BlendMode::Uniform, BlendMode::Gaussian] {
        let plan = SlidingWindowPlan { roi: [16; 3], overlap: 0.7, blend };
        let p = sliding_window_infer(&v, &Constant(0.3), &plan).unwrap();
        assert_eq!(p.shape(), &[3, 40, 37, 20]);
        let want = 1.0 / (1.0 + (-0.3f32).exp());
        assert!(p.data().iter().all(|&x| (x - want).abs() <= 1e-7), "{blend:?}");
    }
}

#[test]
fn small_volume_is_padded_and_cropped() {
    let v = random_volume([10, 16, 5], 2);
    let plan = SlidingWindowPlan { roi: [16; 3], ..Default::default() };
    let p = sliding_window_infer(&v, &Constant(0.0), &plan).unwrap();
    assert_eq!(p.shape(), &[3, 10, 16, 5]);
    assert!(p.data().iter().all(|&x| x == 0.5));
}

#[test]
fn single_tile_matches_direct_forward() {
    let model = SwinUnetr::<f32>::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let v = random_volume([32; 3], 4);
    let plan = SlidingWindowPlan { roi: [32; 3], ..Default::default() };
    let p = sliding_window_infer(&v, &model, &plan).unwrap();
    let tape = Tape::no_grad();
    let direct = tape.constant(model.predict(&v.to_tensor()).unwrap()).sigmoid().into_value();
    assert!(p.max_abs_diff(&direct.reshaped(vec![3, 32, 32, 32]).unwrap()) < 1e-6);
}

#[test]
fn overlapping_tiles_blend_to_mean() {
    let mut v = Volume::zeros(4, [24, 16, 16]);
    let n = v.voxels();
    for i in 0..n {
        v.data[i] = if i / 256 < 8 { -1.0 } else { 2.0 };
    }
    for (blend, check) in [(BlendMode::Uniform, true), (BlendMode::Gaussian, false)] {
        let plan = SlidingWindowPlan { roi: [16; 3], overlap: 0.5, blend };
        assert_eq!(plan_tiles([24, 16, 16], [16; 3], 0.5).unwrap(), vec![[0, 0, 0], [8, 0, 0]]);
        let p = sliding_window_infer(&v, &OriginProbe, &plan).unwrap();
        let (pa, pb) = (1.0 / (1.0 + 1f64.exp()), 1.0 / (1.0 + (-2f64).exp()));
        let at = |x: usize| p.at(&[0, x, 5, 7]) as f64;
        assert!((at(3) - pa).abs() < 1e-7 && (at(20) - pb).abs() < 1e-7);
        for x in 8..16 {
            if check {
                assert!((at(x) - (pa + pb) / 2.0).abs() < 1e-7);
            }
            assert!(at(x) >= pa - 1e-7 && at(x) <= pb + 1e-7);
        }
        if !check {
            // Gaussian: weight of each tile at local position i is exp(-(i - 7.5)^2 / 8).
            let w = |i: f64| (-0.5 * ((i - 7.5) / 2.0).powi(2)).exp();
            let x = 10;
            let (wa, wb) = (w(x as f64), w((x - 8) as f64));
            assert!((at(x) - (wa * pa + wb * pb) / (wa + wb)).abs() < 1e-6);
        }
    }
}

#[test]
fn non_finite_output_names_tile() {
    let v = random_volume([16; 3], 5);
    let plan = SlidingWindowPlan { roi: [8; 3], overlap: 0.0, ..Default::default() };
    let err = sliding_window_infer(&v, &Constant(f32::NAN), &plan).unwrap_err();
    assert!(err.is_numerical() && err.to_string().contains("[0, 0, 0]"));
}

#[test]
fn ensemble_of_copies_is_exact() {
    let model = SwinUnetr::<f32>::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let v = random_volume([32, 32, 40], 7);
    let plan = SlidingWindowPlan { roi: [32; 3], overlap: 0.5, ..Default::default() };
    let single = sliding_window_infer(&v, &model, &plan).unwrap();
    let members: Vec<(String, &dyn TileModel)> = (0..3).map(|i| (format!("m{i}"), &model as &dyn TileModel)).collect();
    let ens = ensemble_infer(&v, &members, &plan).unwrap();
    assert_eq!(ens.data(), single.data());
}

#[test]
fn two_constant_ensemble_averages() {
    let v = random_volume([8; 3], 8);
    let plan = SlidingWindowPlan { roi: [8; 3], ..Default::default() };
    let (a, b) = (Constant(logit(0.2)), Constant(logit(0.6)));
    let pa = sliding_window_infer(&v, &a, &plan).unwrap().data()[0];
    let pb = sliding_window_infer(&v, &b, &plan).unwrap().data()[0];
    let fwd = ensemble_infer(&v, &[("a".into(), &a), ("b".into(), &b)], &plan).unwrap();
    let rev = ensemble_infer(&v, &[("b".into(), &b), ("a".into(), &a)], &plan).unwrap();
    let want = ((pa as f64 + pb as f64) / 2.0) as f32;
    assert!(fwd.data().iter().all(|&x| x == want));
    assert!((want - 0.4).abs() < 1e-6);
    assert_eq!(fwd.data(), rev.data());
}

#[test]
fn ensemble_rejects_shape_disagreement() {
    struct Two;
    impl TileModel for Two {
        fn out_channels(&self) -> usize {
            2
        }
        fn logits(&self, tile: &Tensor<f32>) -> Result<Tensor<f32>> {
            let s = tile.shape();
            Ok(Tensor::zeros(vec![1, 2, s[2], s[3], s[4]]))
        }
    }
    let v = random_volume([8; 3], 9);
    let plan = SlidingWindowPlan { roi: [8; 3], ..Default::default() };
    assert!(ensemble_infer(&v, &[("a".into(), &Constant(0.0)), ("b".into(), &Two)], &plan).is_err());
    assert!(ensemble_infer(&v, &[], &plan).is_err());
}

#[test]
fn fuse_labels_cases() {
    let labels: Vec<u8> = (0..64).map(|i| [0, 1, 2, 4][i % 4]).collect();
    let ch = labels_to_channels(&labels).unwrap();
    let probs = Tensor::new(vec![3, 4, 4, 4], ch.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
    assert_eq!(fuse_labels(&probs, 0.5).unwrap(), labels);
    assert!(fuse_labels(&Tensor::full(vec![3, 2, 2, 2], 0.49), 0.5).unwrap().iter().all(|&l| l == 0));
    let one = Tensor::new(vec![3, 1, 1, 1], vec![0.6, 0.4, 0.4]).unwrap();
    assert_eq!(fuse_labels(&one, 0.5).unwrap(), vec![4]);
}

proptest! {
    #[test]
    fn fused_labels_decode_nested(p in prop::collection::vec(0.0f32..1.0, 3 * 27)) {
        let labels = fuse_labels(&Tensor::new(vec![3, 3, 3, 3], p).unwrap(), 0.5).unwrap();
        let ch = labels_to_channels(&labels).unwrap();
        for i in 0..27 {
            prop_assert!(!ch[0][i] || ch[2][i]);
            prop_assert!(!ch[2][i] || ch[1][i]);
        }
    }
}
