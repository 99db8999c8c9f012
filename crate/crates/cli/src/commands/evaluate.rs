//! `evaluate`: overlap and surface-distance metrics for prediction/truth pairs.

use std::path::Path;

use serde::Deserialize;

use resect_core::metrics::{asd, hd95, overlap_metrics, summarize, surface_distances, MetricsError};
use resect_core::volume::{read_volume, Volume3};

use crate::artifacts::{csv_num, csv_opt, ArtifactLog};
use crate::errors::CliError;

/// CSV header shared by every metrics table the tool emits.
pub const METRIC_COLUMNS: &str = "dice,iou,acc,pre,sen,spe,hd95,asd";

/// Row labels for the per-column summary table.
pub const STAT_NAMES: [&str; 5] = ["min", "median", "mean", "std", "max"];

/// One evaluation case: paths are resolved relative to the manifest file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalCase {
    name: String,
    pred: String,
    gt: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalManifest {
    version: u32,
    cases: Vec<EvalCase>,
}

/// Metric values for one case, `NaN` where a quantity is undefined.
#[derive(Debug, Clone, Copy)]
pub struct MetricRow(pub [f64; 8]);

impl MetricRow {
    pub fn values(&self) -> [f64; 8] {
        self.0
    }

    /// Serializes the row body (no case label) in `METRIC_COLUMNS` order.
    pub fn csv(&self) -> String {
        self.0
            .iter()
            .map(|&v| csv_num(v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Computes the full metric row for one prediction/truth pair.
///
/// Overlap ratios that are undefined (zero denominator) become `NaN`.
/// If either mask has no surface (all background), surface distances are
/// reported as `NaN` with a warning rather than failing the whole run.
pub fn case_metrics(pred: &Volume3, gt: &Volume3) -> Result<MetricRow, CliError> {
    let om = overlap_metrics(pred, gt)?;
    let (hd95, asd) = match surface_distances(pred, gt, gt.spacing_mm()) {
        Ok(set) => (hd95(&set)?, asd(&set)?),
        Err(MetricsError::EmptyMask { side }) => {
            eprintln!("warning: {side} mask has no foreground; surface distances undefined");
            (f64::NAN, f64::NAN)
        }
        Err(e) => return Err(e.into()),
    };
    let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
    Ok(MetricRow([
        opt(om.dice),
        opt(om.iou),
        opt(om.accuracy),
        opt(om.precision),
        opt(om.sensitivity),
        opt(om.specificity),
        hd95,
        asd,
    ]))
}

/// Per-column summary statistics over the finite entries of each column.
///
/// Returns `STAT_NAMES.len()` rows of 8 columns; a column with no finite
/// entries yields `NaN` for all of its statistics.
pub fn column_stats(rows: &[[f64; 8]]) -> [[f64; 8]; 5] {
    let mut out = [[f64::NAN; 8]; 5];
    for col in 0..8 {
        let vals: Vec<f64> = rows
            .iter()
            .map(|r| r[col])
            .filter(|v| v.is_finite())
            .collect();
        if let Ok(s) = summarize(&vals) {
            out[0][col] = s.min;
            out[1][col] = s.median;
            out[2][col] = s.mean;
            out[3][col] = s.std;
            out[4][col] = s.max;
        }
    }
    out
}

/// Renders the summary block with a leading label column.
pub fn summary_csv(rows: &[[f64; 8]]) -> String {
    let stats = column_stats(rows);
    let mut csv = format!("stat,{METRIC_COLUMNS}\n");
    for (name, row) in STAT_NAMES.iter().zip(stats.iter()) {
        csv.push_str(name);
        for v in row {
            csv.push(',');
            csv.push_str(&csv_num(*v));
        }
        csv.push('\n');
    }
    csv
}

pub fn run(manifest_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: EvalManifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(CliError::Config(format!(
            "unsupported evaluation manifest version {} (expected 1)",
            manifest.version
        )));
    }
    if manifest.cases.is_empty() {
        return Err(CliError::Config(
            "evaluation manifest lists no cases".into(),
        ));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut csv = format!("case,{METRIC_COLUMNS}\n");
    let mut rows = Vec::with_capacity(manifest.cases.len());
    for case in &manifest.cases {
        let pred = read_volume(&base.join(&case.pred))?;
        let gt = read_volume(&base.join(&case.gt))?;
        let row = case_metrics(&pred, &gt)?;
        csv.push_str(&format!("{},{}\n", case.name, row.csv()));
        rows.push(row.values());
        println!(
            "{}: dice {}, hd95 {}",
            case.name,
            csv_opt(row.0[0].is_finite().then_some(row.0[0])),
            csv_opt(row.0[6].is_finite().then_some(row.0[6]))
        );
    }

    let mut log = ArtifactLog::new(out)?;
    log.write_text("metrics.csv", &csv)?;
    log.write_text("summary.csv", &summary_csv(&rows))?;
    log.write_manifest("ok", None)?;
    println!("evaluated {} case(s)", rows.len());
    Ok(())
}
