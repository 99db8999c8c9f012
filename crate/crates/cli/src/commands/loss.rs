//! `loss eval`: scores a given probability field against a volume pair.

use std::path::Path;

use resect_core::similarity::{LossEvaluator, LossOptions, MaskField};
use resect_core::volume::read_volume;

use crate::artifacts::{csv_num, ArtifactLog};
use crate::config::PipelineConfig;
use crate::errors::CliError;

pub fn run(
    cfg: &PipelineConfig,
    rho: &Path,
    omega: &Path,
    delta: &Path,
    per_scale: bool,
    out: &Path,
) -> Result<(), CliError> {
    let rho_v = read_volume(rho)?;
    let omega_v = read_volume(omega)?;
    let delta_v = read_volume(delta)?;
    let mask = MaskField::from_delta(delta_v.dims(), &delta_v.to_f64())?;

    let options = LossOptions {
        lambda: cfg.optimizer.lambda_smooth,
        smooth_normalize: false,
        variant: cfg.loss_variant,
    };
    let evaluator = LossEvaluator::new(&rho_v, &omega_v, cfg.msssim.clone(), options)?;
    let report = evaluator.evaluate_value(&mask)?;

    let mut log = ArtifactLog::new(out)?;
    log.write_json("loss.json", &report)?;
    if per_scale {
        let mut csv = String::from("scale,c_mean,s_mean,scc,scc_degenerate,l_mean\n");
        for (i, s) in report.per_scale.iter().enumerate() {
            csv.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                csv_num(s.c_mean),
                csv_num(s.s_mean),
                csv_num(s.scc),
                s.scc_degenerate,
                s.l_mean.map_or_else(|| "nan".to_string(), csv_num)
            ));
        }
        log.write_text("scales.csv", &csv)?;
    }
    log.write_manifest("ok", None)?;
    println!(
        "loss ({}): total {:.6}, similarity {:.6}, smoothness {:.6}",
        cfg.loss_variant.as_str(),
        report.total,
        report.msssim_cscc,
        report.smooth
    );
    Ok(())
}
