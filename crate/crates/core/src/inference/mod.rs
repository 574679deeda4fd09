//! Sliding-window inference, ensembling and label fusion.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SwinUnetr;
use crate::tensor::{Element, Tensor};
use crate::volume::{channels_to_labels, Volume};

/// Largest accepted overlap; anything above leaves no forward progress.
pub const MAX_OVERLAP: f64 = 0.999;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    #[default]
    Uniform,
    /// Weights fall off from the tile centre with sigma = roi / 8.
    Gaussian,
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BlendMode::Uniform),
            "gaussian" => Ok(BlendMode::Gaussian),
            _ => Err(Error::InvalidArgument(format!("unknown blend mode {s:?} (uniform, gaussian)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowPlan {
    pub roi: [usize; 3],
    /// Fraction of the roi shared by neighbouring tiles.
    pub overlap: f64,
    pub blend: BlendMode,
}

impl Default for SlidingWindowPlan {
    fn default() -> Self {
        SlidingWindowPlan { roi: [128; 3], overlap: 0.7, blend: BlendMode::Uniform }
    }
}

impl SlidingWindowPlan {
    pub fn validate(&self) -> Result<()> {
        if self.roi.contains(&0) {
            return Err(Error::InvalidArgument(format!("roi {:?} has a zero extent", self.roi)));
        }
        if !(0.0..MAX_OVERLAP).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!("overlap {} outside [0, {MAX_OVERLAP})", self.overlap)));
        }
        Ok(())
    }

    pub fn step(&self) -> [usize; 3] {
        self.roi.map(|r| ((r as f64 * (1.0 - self.overlap)).floor() as usize).max(1))
    }

    fn weights(&self) -> Vec<f64> {
        let n: usize = self.roi.iter().product();
        match self.blend {
            BlendMode::Uniform => vec![1.0; n],
            BlendMode::Gaussian => {
                let axis = |r: usize| -> Vec<f64> {
                    let (c, s) = ((r as f64 - 1.0) / 2.0, r as f64 / 8.0);
                    (0..r).map(|i| (-0.5 * ((i as f64 - c) / s).powi(2)).exp()).collect()
                };
                let (a, b, c) = (axis(self.roi[0]), axis(self.roi[1]), axis(self.roi[2]));
                let mut w = Vec::with_capacity(n);
                for x in &a {
                    for y in &b {
                        for z in &c {
                            w.push(x * y * z);
                        }
                    }
                }
                w
            }
        }
    }
}

fn axis_origins(extent: usize, roi: usize, step: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * step).take_while(|o| o + roi < extent).collect();
    out.push(extent - roi);
    out
}

/// Tile origins in lexicographic order. Every voxel is covered; the last
/// tile on each axis is clamped to the volume edge.
pub fn plan_tiles(extent: [usize; 3], roi: [usize; 3], overlap: f64) -> Result<Vec<[usize; 3]>> {
    let plan = SlidingWindowPlan { roi, overlap, blend: BlendMode::Uniform };
    plan.validate()?;
    if (0..3).any(|a| roi[a] > extent[a]) {
        return Err(Error::InvalidArgument(format!("roi {roi:?} exceeds volume {extent:?}")));
    }
    let step = plan.step();
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(extent[a], roi[a], step[a])).collect();
    let mut out = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Anything that maps an image tile `[1, S, h, w, d]` to logits
/// `[1, out, h, w, d]`.
pub trait TileModel {
    fn out_channels(&self) -> usize;
    fn logits(&self, tile: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<E: Element> TileModel for SwinUnetr<E> {
    fn out_channels(&self) -> usize {
        self.config().out_channels
    }

    fn logits(&self, tile: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(&tile.cast())?.cast())
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel probabilities `[out, H, W, D]` blended over all tiles.
/// Volumes smaller than the roi are zero-padded centred and cropped back.
pub fn sliding_window_infer(volume: &Volume, model: &dyn TileModel, plan: &SlidingWindowPlan) -> Result<Tensor<f32>> {
    plan.validate()?;
    volume.validate()?;
    let shape = volume.shape;
    let padded = [0, 1, 2].map(|a| shape[a].max(plan.roi[a]));
    let lo = [0, 1, 2].map(|a| (padded[a] - shape[a]) / 2);
    let chans = volume.channels();
    let nvox: usize = padded.iter().product();
    let mut img = vec![0f32; chans * nvox];
    for c in 0..chans {
        let src = volume.channel(c);
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                let s = (x * shape[1] + y) * shape[2];
                let d = c * nvox + ((x + lo[0]) * padded[1] + y + lo[1]) * padded[2] + lo[2];
                img[d..d + shape[2]].copy_from_slice(&src[s..s + shape[2]]);
            }
        }
    }
    let roi = plan.roi;
    let tvox: usize = roi.iter().product();
    let weights = plan.weights();
    let out_c = model.out_channels();
    let mut acc = vec![0f64; out_c * nvox];
    let mut wsum = vec![0f64; nvox];
    let origins = plan_tiles(padded, roi, plan.overlap)?;
    log::debug!("sliding window: {} tiles of {roi:?} over {padded:?}", origins.len());
    let mut tile = vec![0f32; chans * tvox];
    for o in &origins {
        for c in 0..chans {
            for x in 0..roi[0] {
                for y in 0..roi[1] {
                    let s = c * nvox + ((o[0] + x) * padded[1] + o[1] + y) * padded[2] + o[2];
                    let d = (c * roi[0] * roi[1] + x * roi[1] + y) * roi[2];
                    tile[d..d + roi[2]].copy_from_slice(&img[s..s + roi[2]]);
                }
            }
        }
        let t = Tensor::new(vec![1, chans, roi[0], roi[1], roi[2]], tile.clone())?;
        let y = model.logits(&t)?;
        if y.shape() != [1, out_c, roi[0], roi[1], roi[2]] {
            return Err(Error::Shape(format!("model returned {:?} for tile {:?}", y.shape(), t.shape())));
        }
        if !y.all_finite() {
            return Err(Error::NonFinite(format!("model output at tile origin {o:?}")));
        }
        for x in 0..roi[0] {
            for yy in 0..roi[1] {
                for z in 0..roi[2] {
                    let ti = (x * roi[1] + yy) * roi[2] + z;
                    let vi = ((o[0] + x) * padded[1] + o[1] + yy) * padded[2] + o[2] + z;
                    let w = weights[ti];
                    wsum[vi] += w;
                    for c in 0..out_c {
                        acc[c * nvox + vi] += w * sigmoid(y.data()[c * tvox + ti]) as f64;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(out_c * shape.iter().product::<usize>());
    for c in 0..out_c {
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let vi = ((x + lo[0]) * padded[1] + y + lo[1]) * padded[2] + z + lo[2];
                    out.push((acc[c * nvox + vi] / wsum[vi]) as f32);
                }
            }
        }
    }
    Tensor::new(vec![out_c, shape[0], shape[1], shape[2]], out)
}

/// Mean of member probability volumes. Members are summed in order of
/// their keys so the result does not depend on the order given.
pub fn ensemble_infer(volume: &Volume, members: &[(String, &dyn TileModel)], plan: &SlidingWindowPlan) -> Result<Tensor<f32>> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let mut order: Vec<&(String, &dyn TileModel)> = members.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let mut shape: Option<Vec<usize>> = None;
    let mut acc: Vec<f64> = Vec::new();
    for (key, m) in order {
        let p = sliding_window_infer(volume, *m, plan)?;
        match &shape {
            None => {
                shape = Some(p.shape().to_vec());
                acc = p.data().iter().map(|&v| v as f64).collect();
            }
            Some(s) if s.as_slice() != p.shape() => {
                return Err(Error::Shape(format!("member {key} produced {:?}, expected {s:?}", p.shape())));
            }
            Some(_) => acc.iter_mut().zip(p.data()).for_each(|(a, &v)| *a += v as f64),
        }
    }
    let n = members.len() as f64;
    Tensor::new(shape.expect("non-empty"), acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Thresholds `[3, H, W, D]` probabilities (ET, WT, TC) and resolves them to
/// discrete labels with ET > TC > WT precedence.
pub fn fuse_labels(probs: &Tensor<f32>, threshold: f32) -> Result<Vec<u8>> {
    let s = probs.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W, D] probabilities, got {s:?}")));
    }
    let n = s[1] * s[2] * s[3];
    let ch: [Vec<bool>; 3] = [0, 1, 2].map(|c| probs.data()[c * n..(c + 1) * n].iter().map(|&p| p >= threshold).collect());
    Ok(channels_to_labels(&ch)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub checkpoint: PathBuf,
    pub fold: usize,
    pub seed: u64,
    pub best_val_dice: Option<f64>,
}

/// Checkpoints whose sigmoid outputs are averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
    pub aggregation: String,
}

impl EnsembleSpec {
    pub fn new(members: Vec<EnsembleMember>) -> Self {
        EnsembleSpec { members, aggregation: "mean_sigmoid".into() }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: EnsembleSpec = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
        for m in &mut spec.members {
            if m.checkpoint.is_relative() {
                m.checkpoint = root.join(&m.checkpoint);
            }
        }
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Provenance record written next to each prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceManifest {
    pub input: PathBuf,
    pub output: PathBuf,
    pub probabilities: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    /// "single" or "ensemble".
    pub mode: String,
    pub plan: SlidingWindowPlan,
    pub step: [usize; 3],
    /// Overlap is read as a fraction of the roi (step = roi * (1 - overlap)).
    pub overlap_semantics: String,
    pub tiles: usize,
    pub threshold: f32,
}

#[cfg(test)]
mod tests;
