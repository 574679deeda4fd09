use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_mask, load_volume, normalize_nonzero, SegmentationMask, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Case list plus fold assignment. Relative paths resolve against the
/// directory holding the manifest file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    #[serde(default)]
    pub folds: BTreeMap<String, usize>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate case id {}", c.id)));
            }
        }
        for id in self.folds.keys() {
            if !seen.contains(id.as_str()) {
                return Err(Error::InvalidArgument(format!("fold assigned to unknown case {id}")));
            }
        }
        if !self.folds.is_empty() {
            let k = self.num_folds();
            if let Some(f) = (0..k).find(|f| !self.folds.values().any(|v| v == f)) {
                return Err(Error::InvalidArgument(format!("fold {f} of {k} is empty")));
            }
        }
        Ok(())
    }

    pub fn num_folds(&self) -> usize {
        self.folds.values().max().map_or(0, |m| m + 1)
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// (train, validation) case lists for one fold. Cases without a fold
    /// assignment always train.
    pub fn split(&self, fold: usize) -> Result<(Vec<&CaseEntry>, Vec<&CaseEntry>)> {
        if fold >= self.num_folds() {
            return Err(Error::InvalidArgument(format!("fold {fold} out of range ({} folds)", self.num_folds())));
        }
        Ok(self.cases.iter().partition(|c| self.folds.get(&c.id) != Some(&fold)))
    }

    /// Image normalized over non-zero voxels.
    pub fn load_image(&self, case: &CaseEntry) -> Result<Volume> {
        normalize_nonzero(&load_volume(self.resolve(&case.image))?)
    }

    pub fn load_mask(&self, case: &CaseEntry) -> Result<SegmentationMask> {
        let p = case.mask.as_ref().ok_or_else(|| Error::InvalidArgument(format!("case {} has no mask", case.id)))?;
        load_mask(self.resolve(p))
    }
}

/// Shuffles ids by `seed` and assigns contiguous chunks to folds; the
/// first `n mod k` folds get one extra case.
pub fn split_folds(ids: &[String], k: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if k == 0 || ids.len() < k {
        return Err(Error::InvalidArgument(format!("{} cases cannot fill {k} folds", ids.len())));
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    if order.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate case ids".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, rem) = (ids.len() / k, ids.len() % k);
    let mut out = BTreeMap::new();
    let mut it = order.into_iter();
    for f in 0..k {
        for id in it.by_ref().take(base + usize::from(f < rem)) {
            out.insert(id.clone(), f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:04}")).collect()
    }

    fn sizes(f: &BTreeMap<String, usize>, k: usize) -> Vec<usize> {
        (0..k).map(|i| f.values().filter(|&&v| v == i).count()).collect()
    }

    #[test]
    fn ten_cases_five_folds() {
        let f = split_folds(&ids(10), 5, 1).unwrap();
        assert_eq!(f.len(), 10);
        assert_eq!(sizes(&f, 5), vec![2; 5]);
    }

    #[test]
    fn remainder_goes_to_first_folds() {
        let f = split_folds(&ids(1251), 5, 0).unwrap();
        assert_eq!(sizes(&f, 5), vec![251, 250, 250, 250, 250]);
        for s in sizes(&f, 5) {
            let train = 1251 - s;
            assert!((train as f64 / 1251.0 - 0.8).abs() * 1251.0 <= 1.0);
        }
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        assert_eq!(split_folds(&ids(50), 5, 3).unwrap(), split_folds(&ids(50), 5, 3).unwrap());
        assert_ne!(split_folds(&ids(50), 5, 3).unwrap(), split_folds(&ids(50), 5, 4).unwrap());
        let mut rev = ids(50);
        rev.reverse();
        assert_eq!(split_folds(&rev, 5, 3).unwrap(), split_folds(&ids(50), 5, 3).unwrap());
    }

    #[test]
    fn too_few_cases() {
        assert!(split_folds(&ids(4), 5, 0).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let names = ids(4);
        let m = DatasetManifest {
            cases: names.iter().map(|id| CaseEntry { id: id.clone(), image: format!("{id}.svol").into(), mask: Some(format!("{id}_seg.svol").into()) }).collect(),
            folds: split_folds(&names, 2, 0).unwrap(),
            root: PathBuf::new(),
        };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.cases, m.cases);
        assert_eq!(back.root, dir.path());
        let (tr, va) = back.split(1).unwrap();
        assert_eq!((tr.len(), va.len()), (2, 2));
        assert!(back.split(2).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = CaseEntry { id: "a".into(), image: "a".into(), mask: None };
        let m = DatasetManifest { cases: vec![e.clone(), e], ..Default::default() };
        assert!(m.validate().is_err());
    }
}
