//! Multi-channel volumes, segmentation masks and their on-disk format.

mod augment;
mod io;
mod manifest;
mod synth;

pub use augment::{augment, case_rng, pad_centered, random_crop, AugmentationConfig};
pub use io::{convert_raw, load_mask, load_volume, save_channel_mask, save_mask, save_volume, RawDType, SVOL_MAGIC, SVOL_VERSION};
pub use manifest::{split_folds, CaseEntry, DatasetManifest};
pub use synth::{case_id as synth_case_id, synth_case, write_synthetic_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Channel names of the three nested tumor regions, in channel order.
pub const CHANNEL_NAMES: [&str; 3] = ["ET", "WT", "TC"];
/// Conventional modality order for four-channel MRI.
pub const MODALITIES: [&str; 4] = ["T1", "T1c", "T2", "FLAIR"];
/// Discrete labels: background, necrotic / non-enhancing core, edema, enhancing.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

/// Image with `channels` values per voxel, channel-major then H, W, D.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub channel_names: Vec<String>,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], channel_names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let v = Volume { shape, spacing, channel_names, data };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        let names = if channels == MODALITIES.len() {
            MODALITIES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..channels).map(|c| format!("c{c}")).collect()
        };
        Volume { shape, spacing: [1.0; 3], channel_names: names, data: vec![0.0; channels * shape.iter().product::<usize>()] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_names.is_empty() || self.shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "volume needs >= 1 channel and positive extents, got {} x {:?}",
                self.channel_names.len(),
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.data.len() != self.channels() * self.voxels() {
            return Err(Error::Shape(format!(
                "{} values for {} channels of {:?}",
                self.data.len(),
                self.channels(),
                self.shape
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// `[1, C, H, W, D]` tensor.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let [h, w, d] = self.shape;
        Tensor::new(vec![1, self.channels(), h, w, d], self.data.iter().map(|&v| E::from_f64(v as f64)).collect())
            .expect("validated volume")
    }
}

/// Discrete label map with values in [`LABELS`].
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::Shape(format!("{} labels for shape {shape:?}", labels.len())));
        }
        Ok(SegmentationMask { shape, spacing, labels })
    }

    pub fn channels(&self) -> Result<[Vec<bool>; 3]> {
        labels_to_channels(&self.labels)
    }

    /// One-hot `[1, 3, H, W, D]` target in channel order (ET, WT, TC).
    pub fn to_target<E: Element>(&self) -> Result<Tensor<E>> {
        let ch = self.channels()?;
        let [h, w, d] = self.shape;
        let data = ch.iter().flat_map(|c| c.iter().map(|&b| if b { E::ONE } else { E::ZERO })).collect();
        Tensor::new(vec![1, 3, h, w, d], data)
    }
}

/// Per channel: mean and population std over non-zero voxels; only
/// non-zero voxels are rescaled. All-zero channels are left unchanged.
pub fn normalize_nonzero(volume: &Volume) -> Result<Volume> {
    let mut out = volume.clone();
    for c in 0..volume.channels() {
        let ch = out.channel_mut(c);
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &v in ch.iter().filter(|&&v| v != 0.0) {
            n += 1;
            sum += v as f64;
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = ch.iter().filter(|&&v| v != 0.0).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std == 0.0 || !std.is_finite() {
            return Err(Error::DegenerateChannel {
                channel: c,
                msg: format!("{n} non-zero voxels with zero spread"),
            });
        }
        for v in ch.iter_mut().filter(|v| **v != 0.0) {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    Ok(out)
}

/// Discrete labels to channel masks (ET, WT, TC): WT = {1, 2, 4},
/// TC = {1, 4}, ET = {4}.
pub fn labels_to_channels(labels: &[u8]) -> Result<[Vec<bool>; 3]> {
    if let Some(bad) = labels.iter().find(|l| !LABELS.contains(l)) {
        return Err(Error::InvalidArgument(format!("label {bad} not in {LABELS:?}")));
    }
    Ok([
        labels.iter().map(|&l| l == 4).collect(),
        labels.iter().map(|&l| l != 0).collect(),
        labels.iter().map(|&l| l == 1 || l == 4).collect(),
    ])
}

/// Inverse of [`labels_to_channels`]. Voxels breaking the nesting are
/// resolved by precedence ET > TC > WT; returns the labels and the number
/// of such voxels.
pub fn channels_to_labels(ch: &[Vec<bool>; 3]) -> Result<(Vec<u8>, usize)> {
    let n = ch[0].len();
    if ch.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("channel masks differ in length".into()));
    }
    let mut violations = 0;
    let labels = (0..n)
        .map(|i| {
            let (et, wt, tc) = (ch[0][i], ch[1][i], ch[2][i]);
            if (et && !(tc && wt)) || (tc && !wt) {
                violations += 1;
            }
            if et {
                4
            } else if tc {
                1
            } else if wt {
                2
            } else {
                0
            }
        })
        .collect();
    if violations > 0 {
        log::warn!("{violations} voxels violate ET <= TC <= WT nesting; resolved by precedence");
    }
    Ok((labels, violations))
}
