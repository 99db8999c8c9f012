//! `ablation`: runs the in-memory pipeline for every (loss variant, seed)
//! pair and tabulates the metrics for cross-variant comparison.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use resect_core::optimize::{optimize_mask_variant, threshold_mask};
use resect_core::phantom::generate_triple;
use resect_core::registration::{register_rigid, resample};
use resect_core::similarity::LossVariant;
use resect_core::volume::normalize_intensity;

use crate::artifacts::{csv_num, ArtifactLog};
use crate::commands::evaluate::{case_metrics, column_stats, MetricRow, METRIC_COLUMNS, STAT_NAMES};
use crate::config::PipelineConfig;
use crate::errors::CliError;

/// The three similarity objectives compared by the study harness.
const VARIANTS: [LossVariant; 3] = [
    LossVariant::Msssim,
    LossVariant::MsssimScc,
    LossVariant::MsssimCscc,
];

#[derive(Debug, Serialize)]
struct RunRecord {
    variant: &'static str,
    seed: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// One ablation case run entirely in memory (no per-run artifact files).
fn run_case(base: &PipelineConfig, variant: LossVariant, seed: u64) -> Result<MetricRow, CliError> {
    let mut cfg = base.clone().with_seed(seed);
    cfg.loss_variant = variant;

    let (pre, post, gt) = generate_triple(&cfg.phantom)?;
    let gt_vol = gt.to_volume(cfg.phantom.spacing_mm);
    let pre_n = normalize_intensity(&pre, 0.005, 0.995)?.volume;
    let post_n = normalize_intensity(&post, 0.005, 0.995)?.volume;
    let omega = if cfg.registration.enabled {
        let (transform, _ncc) = register_rigid(&pre_n, &post_n, cfg.registration.levels)?;
        resample(&post_n, &transform, &pre_n)
    } else {
        post_n
    };
    let (mask, _trace) = optimize_mask_variant(
        &pre_n,
        &omega,
        &cfg.optimizer,
        &cfg.msssim,
        cfg.loss_variant,
    )?;
    let bin = threshold_mask(&mask, cfg.eval_threshold, pre.spacing_mm())?;
    case_metrics(&bin, &gt_vol)
}

pub fn run(cfg: &PipelineConfig, seeds: &[u64], out: &Path) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("ablation needs at least one seed".into()));
    }

    let mut cases: Vec<(LossVariant, u64)> = VARIANTS
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    // Sort up front so output bytes never depend on scheduling.
    cases.sort_by(|a, b| (a.0.as_str(), a.1).cmp(&(b.0.as_str(), b.1)));

    let results: Vec<(LossVariant, u64, Result<MetricRow, CliError>)> = cases
        .par_iter()
        .map(|&(variant, seed)| (variant, seed, run_case(cfg, variant, seed)))
        .collect();

    let mut csv = format!("variant,seed,{METRIC_COLUMNS}\n");
    let mut records = Vec::with_capacity(results.len());
    for (variant, seed, res) in &results {
        let (row, status, error) = match res {
            Ok(r) => (*r, "ok", None),
            Err(e) => {
                eprintln!("warning: {} seed {seed} failed: {e}", variant.as_str());
                (MetricRow([f64::NAN; 8]), "failed", Some(e.to_string()))
            }
        };
        csv.push_str(&format!("{},{seed},{}\n", variant.as_str(), row.csv()));
        records.push(RunRecord {
            variant: variant.as_str(),
            seed: *seed,
            status,
            error,
        });
    }

    // Per-variant summary block: the stat label sits in the seed column.
    // Same lexicographic variant order as the data rows.
    let mut summary_variants = VARIANTS;
    summary_variants.sort_by_key(|v| v.as_str());
    for variant in summary_variants {
        let rows: Vec<[f64; 8]> = results
            .iter()
            .filter(|(v, _, res)| *v == variant && res.is_ok())
            .map(|(_, _, res)| res.as_ref().unwrap().values())
            .collect();
        let stats = column_stats(&rows);
        for (name, srow) in STAT_NAMES.iter().zip(stats.iter()) {
            csv.push_str(&format!("{},{name}", variant.as_str()));
            for v in srow {
                csv.push(',');
                csv.push_str(&csv_num(*v));
            }
            csv.push('\n');
        }
    }

    let mut log = ArtifactLog::new(out)?;
    log.write_text("ablation.csv", &csv)?;
    log.write_json("runs.json", &records)?;
    let failed = records.iter().filter(|r| r.status == "failed").count();
    log.write_manifest(if failed == 0 { "ok" } else { "partial" }, None)?;
    println!(
        "ablation: {} runs ({} failed), {} seeds x {} variants -> {}",
        records.len(),
        failed,
        seeds.len(),
        VARIANTS.len(),
        log.root().join("ablation.csv").display()
    );
    Ok(())
}
