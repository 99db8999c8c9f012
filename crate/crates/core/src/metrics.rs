//! Segmentation evaluation: overlap ratios, surface distances, and
//! distribution summaries.
//!
//! Overlap metrics are computed from exact voxel counts; ratios with a zero
//! denominator are reported as `None` rather than silently coerced to 0.
//! Surface distances use the 6-connectivity boundary (volume-border
//! foreground counts as surface) and spacing-weighted Euclidean distances
//! between voxel centers. HD95 is the interpolated 95th percentile of the
//! union of both directed distance sets — one of several conventions in use,
//! so cross-study comparisons should note it. Summary statistics use the
//! midpoint median and the sample (n−1) standard deviation.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::util::percentile_sorted;
use crate::volume::Volume3;

/// Errors from metric computation.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask dims mismatch: pred {pred:?} vs gt {gt:?}")]
    DimsMismatch { pred: [usize; 3], gt: [usize; 3] },
    #[error("{side} mask has no foreground voxels")]
    EmptyMask { side: &'static str },
    #[error("distance set is empty")]
    EmptyDistances,
    #[error("cannot summarize an empty list")]
    EmptyRuns,
}

/// Confusion-matrix voxel counts for a predicted vs reference binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OverlapCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

/// Overlap ratios; `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapMetrics {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Directed surface-to-surface distances in millimeters, both ways.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceDistanceSet {
    pub pred_to_gt: Vec<f64>,
    pub gt_to_pred: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

impl OverlapCounts {
    /// Counts voxels of `pred` against `gt`; both are binarized at 0.5.
    pub fn from_volumes(pred: &Volume3, gt: &Volume3) -> Result<Self, MetricsError> {
        if pred.dims() != gt.dims() {
            return Err(MetricsError::DimsMismatch {
                pred: pred.dims(),
                gt: gt.dims(),
            });
        }
        let mut c = OverlapCounts {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            true_neg: 0,
        };
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p >= 0.5, g >= 0.5) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Derives the six overlap ratios from the counts.
    pub fn metrics(&self) -> OverlapMetrics {
        let (tp, fp, fn_, tn) = (self.true_pos, self.false_pos, self.false_neg, self.true_neg);
        OverlapMetrics {
            dice: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            accuracy: ratio(tp + tn, self.total()),
            precision: ratio(tp, tp + fp),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
        }
    }
}

/// Counts and derives overlap ratios in one call.
pub fn overlap_metrics(pred: &Volume3, gt: &Volume3) -> Result<OverlapMetrics, MetricsError> {
    Ok(OverlapCounts::from_volumes(pred, gt)?.metrics())
}

/// Foreground voxels (≥ 0.5) with at least one of their 6 face-neighbors
/// background or outside the volume.
fn surface_voxels(mask: &Volume3) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let fg = |x: usize, y: usize, z: usize| data[(z * ny + y) * nx + x] >= 0.5;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !fg(x, y, z) {
                    continue;
                }
                let boundary = x == 0
                    || x == nx - 1
                    || y == 0
                    || y == ny - 1
                    || z == 0
                    || z == nz - 1
                    || !fg(x - 1, y, z)
                    || !fg(x + 1, y, z)
                    || !fg(x, y - 1, z)
                    || !fg(x, y + 1, z)
                    || !fg(x, y, z - 1)
                    || !fg(x, y, z + 1);
                if boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.par_iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in to {
                let dx = (a[0] as f64 - b[0] as f64) * spacing[0];
                let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
                let dz = (a[2] as f64 - b[2] as f64) * spacing[2];
                best = best.min(dx * dx + dy * dy + dz * dz);
            }
            best.sqrt()
        })
        .collect()
}

/// Computes both directed surface distance sets between two binary masks.
///
/// Distances are between voxel centers, weighted by `spacing_mm`; any spacing
/// stored in the volumes themselves is ignored.
pub fn surface_distances(
    pred: &Volume3,
    gt: &Volume3,
    spacing_mm: [f64; 3],
) -> Result<SurfaceDistanceSet, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimsMismatch {
            pred: pred.dims(),
            gt: gt.dims(),
        });
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    if sp.is_empty() {
        return Err(MetricsError::EmptyMask { side: "pred" });
    }
    if sg.is_empty() {
        return Err(MetricsError::EmptyMask { side: "gt" });
    }
    Ok(SurfaceDistanceSet {
        pred_to_gt: directed_distances(&sp, &sg, spacing_mm),
        gt_to_pred: directed_distances(&sg, &sp, spacing_mm),
    })
}

fn union_sorted(sd: &SurfaceDistanceSet) -> Result<Vec<f64>, MetricsError> {
    let mut all: Vec<f64> = sd
        .pred_to_gt
        .iter()
        .chain(&sd.gt_to_pred)
        .copied()
        .collect();
    if all.is_empty() {
        return Err(MetricsError::EmptyDistances);
    }
    all.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    Ok(all)
}

/// 95th percentile (linear interpolation) of the union of both directed sets.
pub fn hd95(sd: &SurfaceDistanceSet) -> Result<f64, MetricsError> {
    Ok(percentile_sorted(&union_sorted(sd)?, 0.95))
}

/// Mean of the union of both directed sets.
pub fn asd(sd: &SurfaceDistanceSet) -> Result<f64, MetricsError> {
    let all = union_sorted(sd)?;
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

/// Distribution summary of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryStats {
    pub min: f64,
    /// Midpoint of the two central order statistics for even counts.
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation (n−1); 0 for a single value.
    pub std: f64,
    pub max: f64,
}

/// Summarizes one metric column across runs.
pub fn summarize(values: &[f64]) -> Result<SummaryStats, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyRuns);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("summary values are finite"));
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(SummaryStats {
        min: sorted[0],
        median: percentile_sorted(&sorted, 0.5),
        mean,
        std,
        max: sorted[n - 1],
    })
}
