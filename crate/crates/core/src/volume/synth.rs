use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{case_rng, save_mask, save_volume, split_folds, CaseEntry, DatasetManifest, SegmentationMask, Volume, MODALITIES};
use crate::error::{Error, Result};

/// Procedural cases: a brain-like ellipsoid holding three nested tumor
/// ellipsoids (edema ⊃ necrotic core ⊃ enhancing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cases: usize,
    pub shape: [usize; 3],
    pub noise: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { cases: 2, shape: [32; 3], noise: 0.03, folds: 2, seed: 0 }
    }
}

// Rows: brain, edema (2), necrotic core (1), enhancing (4). Columns: modality.
const CONTRAST: [[f32; 4]; 4] = [
    [0.60, 0.60, 0.50, 0.50],
    [0.50, 0.55, 0.90, 1.00],
    [0.30, 0.30, 0.80, 0.70],
    [0.70, 1.00, 0.70, 0.60],
];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

pub fn case_id(index: usize) -> String {
    format!("synth{index:03}")
}

pub fn synth_case(cfg: &SynthConfig, index: usize) -> Result<(Volume, SegmentationMask)> {
    if cfg.shape.iter().any(|&s| s < 8) {
        return Err(Error::Config(format!("synthetic shape {:?} needs extents >= 8", cfg.shape)));
    }
    let mut rng = case_rng(cfg.seed, 0, &case_id(index));
    let half = cfg.shape.map(|s| s as f64 / 2.0);
    let brain = Ellipsoid { center: half, radii: half.map(|h| h * 0.9) };
    let scale = half.iter().cloned().fold(f64::INFINITY, f64::min);
    let center = half.map(|h| h + rng.random_range(-0.1..0.1) * h);
    let outer = [0, 1, 2].map(|_| scale * rng.random_range(0.5..0.6));
    let shells = [1.0, rng.random_range(0.6..0.7), rng.random_range(0.3..0.4)];
    let tumor: Vec<Ellipsoid> = shells.iter().map(|&f| Ellipsoid { center, radii: outer.map(|r| r * f) }).collect();

    let n: usize = cfg.shape.iter().product();
    let [_, w, d] = cfg.shape;
    let mut labels = vec![0u8; n];
    let mut data = vec![0f32; 4 * n];
    let normal = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for (i, label) in labels.iter_mut().enumerate() {
        let p = [(i / (w * d)) as f64 + 0.5, ((i / d) % w) as f64 + 0.5, (i % d) as f64 + 0.5];
        if !brain.contains(p) {
            continue;
        }
        let depth = tumor.iter().take_while(|e| e.contains(p)).count();
        *label = [0, 2, 1, 4][depth];
        for c in 0..4 {
            let v = CONTRAST[depth][c] + normal.sample(&mut rng) as f32;
            data[c * n + i] = v.max(0.01);
        }
    }
    let names = MODALITIES.iter().map(|s| s.to_string()).collect();
    Ok((Volume::new(cfg.shape, [1.0; 3], names, data)?, SegmentationMask::new(cfg.shape, [1.0; 3], labels)?))
}

/// Writes every case plus `manifest.json` under `dir`.
pub fn write_synthetic_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cases = Vec::with_capacity(cfg.cases);
    for i in 0..cfg.cases {
        let id = case_id(i);
        let (v, m) = synth_case(cfg, i)?;
        let (img, seg) = (format!("{id}.svol"), format!("{id}_seg.svol"));
        save_volume(&v, dir.join(&img))?;
        save_mask(&m, dir.join(&seg))?;
        cases.push(CaseEntry { id, image: img.into(), mask: Some(seg.into()) });
    }
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let folds = if cfg.folds > 0 { split_folds(&ids, cfg.folds, cfg.seed)? } else { Default::default() };
    let manifest = DatasetManifest { cases, folds, root: dir.to_path_buf() };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::labels_to_channels;

    #[test]
    fn nested_regions_present() {
        let cfg = SynthConfig::default();
        let (v, m) = synth_case(&cfg, 0).unwrap();
        assert_eq!((v.channels(), v.shape, v.spacing), (4, [32; 3], [1.0; 3]));
        let ch = labels_to_channels(&m.labels).unwrap();
        let counts: Vec<usize> = ch.iter().map(|c| c.iter().filter(|&&b| b).count()).collect();
        // ET < TC < WT, all non-empty
        assert!(counts[0] > 0 && counts[0] < counts[2] && counts[2] < counts[1], "{counts:?}");
        let zeros = v.channel(0).iter().filter(|&&x| x == 0.0).count();
        assert!(zeros > 0 && zeros < v.voxels());
    }

    #[test]
    fn deterministic_and_case_dependent() {
        let cfg = SynthConfig::default();
        assert_eq!(synth_case(&cfg, 1).unwrap(), synth_case(&cfg, 1).unwrap());
        assert_ne!(synth_case(&cfg, 1).unwrap().1, synth_case(&cfg, 0).unwrap().1);
    }

    #[test]
    fn dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic_dataset(&SynthConfig::default(), dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.num_folds(), 2);
        let img = back.load_image(&m.cases[0]).unwrap();
        assert_eq!((img.channels(), img.spacing), (4, [1.0; 3]));
        back.load_mask(&m.cases[1]).unwrap();
    }
}
