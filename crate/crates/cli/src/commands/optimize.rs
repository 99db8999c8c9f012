//! `optimize`: estimates the removal mask for an existing volume pair.

use std::path::Path;

use resect_core::optimize::{optimize_mask_variant, threshold_mask};
use resect_core::similarity::{LossReport, MaskField};
use resect_core::volume::{read_volume, Volume3};

use crate::artifacts::{csv_num, ArtifactLog};
use crate::config::PipelineConfig;
use crate::errors::CliError;

/// Writes `delta.{json,raw}`, `mask.{json,raw}`, and `trace.csv`; returns
/// the binarized mask for downstream stages.
pub fn write_mask_artifacts(
    log: &mut ArtifactLog,
    mask: &MaskField,
    trace: &[LossReport],
    threshold: f64,
    spacing_mm: [f64; 3],
) -> Result<Volume3, CliError> {
    log.write_volume("delta", &mask.to_volume(spacing_mm))?;
    let bin = threshold_mask(mask, threshold, spacing_mm)?;
    log.write_volume("mask", &bin)?;
    let mut csv = String::from("iter,total,msssim_cscc,smooth\n");
    for (i, r) in trace.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{}\n",
            csv_num(r.total),
            csv_num(r.msssim_cscc),
            csv_num(r.smooth)
        ));
    }
    log.write_text("trace.csv", &csv)?;
    Ok(bin)
}

pub fn run(
    cfg: &PipelineConfig,
    rho: &Path,
    omega: &Path,
    threshold: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let rho_v = read_volume(rho)?;
    let omega_v = read_volume(omega)?;
    let (mask, trace) = optimize_mask_variant(
        &rho_v,
        &omega_v,
        &cfg.optimizer,
        &cfg.msssim,
        cfg.loss_variant,
    )?;
    let mut log = ArtifactLog::new(out)?;
    let bin = write_mask_artifacts(
        &mut log,
        &mask,
        &trace,
        threshold.unwrap_or(cfg.eval_threshold),
        rho_v.spacing_mm(),
    )?;
    log.write_manifest("ok", None)?;
    let final_loss = trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    let fg = bin.data().iter().filter(|&&v| v >= 0.5).count();
    println!(
        "optimize ({}): {} iterations, final loss {final_loss:.6}, mask covers {fg} voxels",
        cfg.loss_variant.as_str(),
        trace.len()
    );
    Ok(())
}
