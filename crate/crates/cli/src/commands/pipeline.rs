//! `pipeline`: phantom → (optional) registration → mask optimization →
//! evaluation → meshes, with every artifact hashed into `manifest.json`.

use std::path::Path;

use resect_core::mesh::{marching_cubes, write_stl};
use resect_core::optimize::optimize_mask_variant;
use resect_core::phantom::generate_triple;
use resect_core::registration::{register_rigid, resample};
use resect_core::similarity::apply_mask;
use resect_core::volume::normalize_intensity;

use crate::artifacts::ArtifactLog;
use crate::commands::evaluate::{case_metrics, summary_csv, MetricRow, METRIC_COLUMNS};
use crate::commands::optimize::write_mask_artifacts;
use crate::commands::register::TransformReport;
use crate::config::PipelineConfig;
use crate::errors::CliError;

/// Intensity percentiles mapped to 0 and 1 before optimization.
const NORM_LO: f64 = 0.005;
const NORM_HI: f64 = 0.995;

/// What a finished pipeline run reports back.
pub struct PipelineOutcome {
    pub row: MetricRow,
    pub iterations: usize,
    pub final_loss: f64,
}

pub fn run(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome, CliError> {
    let mut log = ArtifactLog::new(out)?;
    match stages(cfg, &mut log) {
        Ok(outcome) => {
            log.write_manifest("ok", None)?;
            Ok(outcome)
        }
        Err(e) => {
            // Record what was produced before the failure; the manifest write
            // itself is best-effort so the original error always surfaces.
            let _ = log.write_manifest("failed", Some(&e.to_string()));
            Err(e)
        }
    }
}

fn stages(cfg: &PipelineConfig, log: &mut ArtifactLog) -> Result<PipelineOutcome, CliError> {
    log.write_json("spec.json", cfg)?;

    let (pre, post, gt) = generate_triple(&cfg.phantom)?;
    log.write_volume("pre", &pre)?;
    log.write_volume("post", &post)?;
    let gt_vol = gt.to_volume(cfg.phantom.spacing_mm);
    log.write_volume("gt", &gt_vol)?;

    let pre_n = normalize_intensity(&pre, NORM_LO, NORM_HI)?.volume;
    let post_n = normalize_intensity(&post, NORM_LO, NORM_HI)?.volume;
    log.write_volume("pre_norm", &pre_n)?;
    log.write_volume("post_norm", &post_n)?;

    let omega = if cfg.registration.enabled {
        let (transform, ncc) = register_rigid(&pre_n, &post_n, cfg.registration.levels)?;
        log.write_json("transform.json", &TransformReport { transform, ncc })?;
        let aligned = resample(&post_n, &transform, &pre_n);
        log.write_volume("post_reg", &aligned)?;
        aligned
    } else {
        post_n.clone()
    };

    let (mask, trace) = optimize_mask_variant(
        &pre_n,
        &omega,
        &cfg.optimizer,
        &cfg.msssim,
        cfg.loss_variant,
    )?;
    let bin = write_mask_artifacts(log, &mask, &trace, cfg.eval_threshold, pre.spacing_mm())?;

    let row = case_metrics(&bin, &gt_vol)?;
    log.write_text(
        "metrics.csv",
        &format!("case,{METRIC_COLUMNS}\nphantom,{}\n", row.csv()),
    )?;
    log.write_text("summary.csv", &summary_csv(&[row.values()]))?;

    let mask_mesh = marching_cubes(&bin, 0.5)?;
    write_stl(&mask_mesh, &log.root().join("mask.stl"))?;
    log.record("mask.stl")?;

    let masked = apply_mask(&pre_n, &mask)?;
    let masked_mesh = marching_cubes(&masked, cfg.mesh_iso)?;
    write_stl(&masked_mesh, &log.root().join("masked.stl"))?;
    log.record("masked.stl")?;

    let final_loss = trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok(PipelineOutcome {
        row,
        iterations: trace.len(),
        final_loss,
    })
}
