use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{dice_score, hausdorff_distance};
use crate::error::Result;
use crate::volume::{labels_to_channels, CHANNEL_NAMES};

/// One value per tumor sub-region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct RegionValues<T> {
    pub et: T,
    pub wt: T,
    pub tc: T,
}

impl<T: Copy> RegionValues<T> {
    pub fn from_array(v: [T; 3]) -> Self {
        RegionValues { et: v[0], wt: v[1], tc: v[2] }
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.et, self.wt, self.tc]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dice: RegionValues<f64>,
    /// `None` when either mask of a region is empty.
    pub hausdorff: RegionValues<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: RegionValues<f64>,
    pub dice_avg: f64,
    /// Means over cases where the distance is defined.
    pub hausdorff: RegionValues<Option<f64>>,
    pub hausdorff_avg: Option<f64>,
    /// Cases skipped per region because the distance was undefined.
    pub hausdorff_undefined: RegionValues<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentile used for the Hausdorff distance (100 = classic).
    pub hausdorff_percentile: f64,
    pub cases: Vec<CaseMetrics>,
    pub missing: Vec<String>,
    pub aggregate: Aggregate,
}

/// Metrics of one case from discrete label maps.
pub fn evaluate_case(id: &str, pred: &[u8], gt: &[u8], shape: [usize; 3], spacing: [f64; 3], pct: f64) -> Result<CaseMetrics> {
    let (p, g) = (labels_to_channels(pred)?, labels_to_channels(gt)?);
    let mut dice = [0.0; 3];
    let mut hd = [None; 3];
    for c in 0..3 {
        dice[c] = dice_score(&p[c], &g[c])?;
        hd[c] = hausdorff_distance(&p[c], &g[c], shape, spacing, pct)?;
    }
    Ok(CaseMetrics { id: id.to_string(), dice: RegionValues::from_array(dice), hausdorff: RegionValues::from_array(hd) })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(cases: &[CaseMetrics]) -> Aggregate {
    let mut dice = [0.0; 3];
    let mut hd = [None; 3];
    let mut undefined = [0usize; 3];
    for c in 0..3 {
        dice[c] = mean(cases.iter().map(|m| m.dice.to_array()[c])).unwrap_or(f64::NAN);
        hd[c] = mean(cases.iter().filter_map(|m| m.hausdorff.to_array()[c]));
        undefined[c] = cases.iter().filter(|m| m.hausdorff.to_array()[c].is_none()).count();
    }
    let hd_avg = if hd.iter().all(Option::is_some) { mean(hd.iter().flatten().copied()) } else { None };
    Aggregate {
        dice: RegionValues::from_array(dice),
        dice_avg: dice.iter().sum::<f64>() / 3.0,
        hausdorff: RegionValues::from_array(hd),
        hausdorff_avg: hd_avg,
        hausdorff_undefined: RegionValues::from_array(undefined),
    }
}

impl EvalReport {
    pub fn new(cases: Vec<CaseMetrics>, missing: Vec<String>, pct: f64) -> Self {
        let aggregate = aggregate(&cases);
        EvalReport { hausdorff_percentile: pct, cases, missing, aggregate }
    }

    /// Rows per case plus a final `mean` row; Dice and Hausdorff columns
    /// each as ET, WT, TC, Avg. Undefined distances are left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let hd_label = if self.hausdorff_percentile == 100.0 { "HD".to_string() } else { format!("HD{}", self.hausdorff_percentile) };
        let mut header = vec!["id".to_string()];
        for n in CHANNEL_NAMES.iter().chain(&["Avg"]) {
            header.push(format!("Dice_{n}"));
        }
        for n in CHANNEL_NAMES.iter().chain(&["Avg"]) {
            header.push(format!("{hd_label}_{n}"));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = |id: &str, dice: [f64; 3], hd: [Option<f64>; 3]| {
            let davg = dice.iter().sum::<f64>() / 3.0;
            let havg = if hd.iter().all(Option::is_some) { Some(hd.iter().flatten().sum::<f64>() / 3.0) } else { None };
            let mut cells = vec![id.to_string()];
            cells.extend(dice.iter().map(|&d| fmt(Some(d))));
            cells.push(fmt(Some(davg)));
            cells.extend(hd.iter().map(|&h| fmt(h)));
            cells.push(fmt(havg));
            let _ = writeln!(out, "{}", cells.join(","));
        };
        for c in &self.cases {
            row(&c.id, c.dice.to_array(), c.hausdorff.to_array());
        }
        row("mean", self.aggregate.dice.to_array(), self.aggregate.hausdorff.to_array());
        out
    }
}

/// Per-region Dice of a batch of channel masks, used for validation logs.
pub fn region_dice(pred: &[Vec<bool>; 3], gt: &[Vec<bool>; 3]) -> Result<RegionValues<f64>> {
    let mut d = [0.0; 3];
    for c in 0..3 {
        d[c] = dice_score(&pred[c], &gt[c])?;
    }
    Ok(RegionValues::from_array(d))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let shape = [3, 3, 3];
        let mut gt = vec![0u8; 27];
        gt[13] = 4;
        gt[12] = 1;
        gt[14] = 2;
        let m = evaluate_case("a", &gt, &gt, shape, [1.0; 3], 95.0).unwrap();
        assert_eq!(m.dice.to_array(), [1.0; 3]);
        assert_eq!(m.hausdorff.to_array(), [Some(0.0); 3]);
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let a = CaseMetrics { id: "a".into(), dice: RegionValues::from_array([1.0, 0.5, 0.0]), hausdorff: RegionValues::from_array([Some(1.0), None, Some(3.0)]) };
        let b = CaseMetrics { id: "b".into(), dice: RegionValues::from_array([0.0, 0.5, 1.0]), hausdorff: RegionValues::from_array([Some(3.0), Some(2.0), Some(1.0)]) };
        let r = EvalReport::new(vec![a, b], vec!["c".into()], 95.0);
        assert_eq!(r.aggregate.dice.to_array(), [0.5, 0.5, 0.5]);
        assert_eq!(r.aggregate.hausdorff.to_array(), [Some(2.0), Some(2.0), Some(2.0)]);
        assert_eq!(r.aggregate.hausdorff_undefined.wt, 1);
        let csv = r.to_csv();
        assert!(csv.starts_with("id,Dice_ET,Dice_WT,Dice_TC,Dice_Avg,HD95_ET"));
        assert!(csv.lines().last().unwrap().starts_with("mean,0.500000,0.500000,0.500000,0.500000,2.000000"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["cases"][0]["dice"]["ET"], 1.0);
        assert!(json["cases"][0]["hausdorff"]["WT"].is_null());
    }
}
