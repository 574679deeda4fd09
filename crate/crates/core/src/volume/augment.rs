use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SegmentationMask, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub crop_size: [usize; 3],
    pub flip_prob: [f64; 3],
    /// Additive per-channel shift range (open interval).
    pub intensity_shift: [f64; 2],
    /// Multiplicative per-channel scale range (open interval).
    pub intensity_scale: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_size: [128; 3],
            flip_prob: [0.5; 3],
            intensity_shift: [-0.1, 0.1],
            intensity_scale: [0.9, 1.1],
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No flips, zero shift, unit scale.
    pub fn identity(crop_size: [usize; 3]) -> Self {
        AugmentationConfig { crop_size, flip_prob: [0.0; 3], intensity_shift: [0.0, 0.0], intensity_scale: [1.0, 1.0], seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size.contains(&0) {
            return Err(Error::Config(format!("crop_size {:?} has a zero extent", self.crop_size)));
        }
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("flip_prob {:?} outside [0, 1]", self.flip_prob)));
        }
        for (name, [lo, hi]) in [("intensity_shift", self.intensity_shift), ("intensity_scale", self.intensity_scale)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is not ordered")));
            }
        }
        Ok(())
    }
}

/// Independent stream for one (seed, epoch, case) triple.
pub fn case_rng(seed: u64, epoch: u64, case_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(case_id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Draw from the open interval `(lo, hi)`; `lo` when the range is empty.
fn open_uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo >= hi {
        return lo;
    }
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

fn copy_block<T: Copy>(src: &[T], src_shape: [usize; 3], dst: &mut [T], dst_shape: [usize; 3], src_off: [usize; 3], dst_off: [usize; 3], ext: [usize; 3]) {
    for x in 0..ext[0] {
        for y in 0..ext[1] {
            let s = ((src_off[0] + x) * src_shape[1] + src_off[1] + y) * src_shape[2] + src_off[2];
            let d = ((dst_off[0] + x) * dst_shape[1] + dst_off[1] + y) * dst_shape[2] + dst_off[2];
            dst[d..d + ext[2]].copy_from_slice(&src[s..s + ext[2]]);
        }
    }
}

/// Zero-pads both volume and mask, centered, to at least `target` per axis.
pub fn pad_centered(volume: &Volume, mask: &SegmentationMask, target: [usize; 3]) -> (Volume, SegmentationMask) {
    let shape = volume.shape;
    let new = [0, 1, 2].map(|a| shape[a].max(target[a]));
    if new == shape {
        return (volume.clone(), mask.clone());
    }
    let off = [0, 1, 2].map(|a| (new[a] - shape[a]) / 2);
    let mut v = Volume { shape: new, data: vec![0.0; volume.channels() * new.iter().product::<usize>()], ..volume.clone() };
    for c in 0..volume.channels() {
        copy_block(volume.channel(c), shape, v.channel_mut(c), new, [0; 3], off, shape);
    }
    let mut labels = vec![0u8; new.iter().product()];
    copy_block(&mask.labels, shape, &mut labels, new, [0; 3], off, shape);
    (v, SegmentationMask { shape: new, spacing: mask.spacing, labels })
}

/// Crops image and mask at the same offset, uniform over valid positions.
pub fn random_crop<R: Rng + ?Sized>(volume: &Volume, mask: &SegmentationMask, crop: [usize; 3], rng: &mut R) -> Result<(Volume, SegmentationMask)> {
    if volume.shape != mask.shape {
        return Err(Error::Shape(format!("volume {:?} vs mask {:?}", volume.shape, mask.shape)));
    }
    let (volume, mask) = pad_centered(volume, mask, crop);
    let shape = volume.shape;
    let off = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - crop[a]));
    if off == [0; 3] && shape == crop {
        return Ok((volume, mask));
    }
    let mut v = Volume { shape: crop, data: vec![0.0; volume.channels() * crop.iter().product::<usize>()], ..volume.clone() };
    for c in 0..volume.channels() {
        copy_block(volume.channel(c), shape, v.channel_mut(c), crop, off, [0; 3], crop);
    }
    let mut labels = vec![0u8; crop.iter().product()];
    copy_block(&mask.labels, shape, &mut labels, crop, off, [0; 3], crop);
    Ok((v, SegmentationMask { shape: crop, spacing: mask.spacing, labels }))
}

fn flip_axis<T: Copy>(data: &mut [T], shape: [usize; 3], axis: usize) {
    let [h, w, d] = shape;
    let idx = |x: usize, y: usize, z: usize| (x * w + y) * d + z;
    match axis {
        0 => {
            for x in 0..h / 2 {
                for y in 0..w {
                    for z in 0..d {
                        data.swap(idx(x, y, z), idx(h - 1 - x, y, z));
                    }
                }
            }
        }
        1 => {
            for x in 0..h {
                for y in 0..w / 2 {
                    for z in 0..d {
                        data.swap(idx(x, y, z), idx(x, w - 1 - y, z));
                    }
                }
            }
        }
        _ => {
            for row in data.chunks_exact_mut(d) {
                row.reverse();
            }
        }
    }
}

/// Random flips (image and mask together), then per-channel intensity
/// shift, then per-channel intensity scale.
pub fn augment<R: Rng + ?Sized>(volume: &Volume, mask: &SegmentationMask, cfg: &AugmentationConfig, rng: &mut R) -> Result<(Volume, SegmentationMask)> {
    cfg.validate()?;
    if volume.shape != mask.shape {
        return Err(Error::Shape(format!("volume {:?} vs mask {:?}", volume.shape, mask.shape)));
    }
    let (mut v, mut m) = (volume.clone(), mask.clone());
    for axis in 0..3 {
        if rng.random_bool(cfg.flip_prob[axis]) {
            for c in 0..v.channels() {
                let shape = v.shape;
                flip_axis(v.channel_mut(c), shape, axis);
            }
            flip_axis(&mut m.labels, m.shape, axis);
        }
    }
    let shifts: Vec<f64> = (0..v.channels()).map(|_| open_uniform(rng, cfg.intensity_shift)).collect();
    let scales: Vec<f64> = (0..v.channels()).map(|_| open_uniform(rng, cfg.intensity_scale)).collect();
    for c in 0..v.channels() {
        let (s, k) = (shifts[c] as f32, scales[c] as f32);
        v.channel_mut(c).iter_mut().for_each(|x| *x = (*x + s) * k);
    }
    Ok((v, m))
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;

    fn sample(shape: [usize; 3], seed: u64) -> (Volume, SegmentationMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Volume::zeros(4, shape);
        v.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let labels = (0..shape.iter().product()).map(|_| [0u8, 1, 2, 4][rng.random_range(0..4)]).collect();
        (v, SegmentationMask::new(shape, [1.0; 3], labels).unwrap())
    }

    #[test]
    fn crop_identity_and_shapes() {
        let (v, m) = sample([6, 5, 4], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (cv, cm) = random_crop(&v, &m, [6, 5, 4], &mut rng).unwrap();
        assert_eq!((cv, cm), (v.clone(), m.clone()));
        let (cv, cm) = random_crop(&v, &m, [3, 8, 2], &mut rng).unwrap();
        assert_eq!((cv.shape, cm.shape), ([3, 8, 2], [3, 8, 2]));
        assert_eq!(cv.data.len(), 4 * 48);
    }

    #[test]
    fn brats_sized_crop() {
        let v = Volume::zeros(4, [240, 240, 155]);
        let m = SegmentationMask::new([240, 240, 155], [1.0; 3], vec![0; 240 * 240 * 155]).unwrap();
        let (cv, cm) = random_crop(&v, &m, [128; 3], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!((cv.channels(), cv.shape, cm.shape), (4, [128; 3], [128; 3]));
    }

    #[test]
    fn crop_same_offset_for_image_and_mask() {
        let (mut v, m) = sample([7, 6, 5], 2);
        for c in 0..4 {
            let src: Vec<f32> = m.labels.iter().map(|&l| l as f32).collect();
            v.channel_mut(c).copy_from_slice(&src);
        }
        for seed in 0..10 {
            let (cv, cm) = random_crop(&v, &m, [4, 3, 5], &mut case_rng(seed, 0, "x")).unwrap();
            let as_f: Vec<f32> = cm.labels.iter().map(|&l| l as f32).collect();
            assert_eq!(cv.channel(2), as_f.as_slice());
        }
    }

    #[test]
    fn determinism() {
        let (v, m) = sample([9, 9, 9], 3);
        let a = random_crop(&v, &m, [4; 3], &mut case_rng(7, 2, "c1")).unwrap();
        let b = random_crop(&v, &m, [4; 3], &mut case_rng(7, 2, "c1")).unwrap();
        assert_eq!(a, b);
        assert_ne!(case_rng(7, 2, "c1").next_u64(), case_rng(7, 3, "c1").next_u64());
    }

    #[test]
    fn identity_augmentation() {
        let (v, m) = sample([4, 5, 6], 4);
        let cfg = AugmentationConfig::identity([4, 5, 6]);
        let (av, am) = augment(&v, &m, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((av, am), (v, m));
    }

    #[test]
    fn double_flip_is_identity_and_spatially_consistent() {
        let (mut v, m) = sample([4, 5, 6], 5);
        let lab: Vec<f32> = m.labels.iter().map(|&l| l as f32).collect();
        v.channel_mut(0).copy_from_slice(&lab);
        let cfg = AugmentationConfig { flip_prob: [1.0; 3], intensity_shift: [0.0, 0.0], intensity_scale: [1.0, 1.0], ..AugmentationConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (fv, fm) = augment(&v, &m, &cfg, &mut rng).unwrap();
        assert_ne!(fm, m);
        let flipped: Vec<f32> = fm.labels.iter().map(|&l| l as f32).collect();
        assert_eq!(fv.channel(0), flipped.as_slice());
        let (bv, bm) = augment(&fv, &fm, &cfg, &mut rng).unwrap();
        assert_eq!((bv, bm), (v, m));
    }

    #[test]
    fn shift_is_constant_per_channel() {
        let (v, m) = sample([3, 3, 3], 6);
        let cfg = AugmentationConfig { flip_prob: [0.0; 3], intensity_scale: [1.0, 1.0], ..AugmentationConfig::default() };
        let (av, am) = augment(&v, &m, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(am, m);
        for c in 0..4 {
            let d0 = av.channel(c)[0] - v.channel(c)[0];
            assert!(d0.abs() < 0.1);
            for (a, b) in av.channel(c).iter().zip(v.channel(c)) {
                assert!(((a - b) - d0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = AugmentationConfig { intensity_scale: [1.1, 0.9], ..AugmentationConfig::default() };
        assert!(bad.validate().is_err());
        AugmentationConfig::default().validate().unwrap();
    }
}
