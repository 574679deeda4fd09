//! Soft Dice loss, overlap and surface-distance metrics, evaluation reports.

mod dice;
mod hausdorff;
mod report;

pub use dice::{dice_score, DICE_EPS};
pub use hausdorff::{boundary, hausdorff_distance, percentile, squared_distance_transform};
pub use report::{aggregate, evaluate_case, region_dice, Aggregate, CaseMetrics, EvalReport, RegionValues};
