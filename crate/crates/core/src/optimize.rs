//! Per-volume optimization of the latent mask field.
//!
//! Instead of training a network across a dataset, the removal mask for one
//! (ρ, ω) pair is found directly: the latent field behind δ is updated with
//! adaptive moment estimation (Adam) on the exact analytic gradient of the
//! total similarity-plus-smoothness objective. The loop is sequential over
//! iterations and bitwise deterministic for a given configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{
    LossEvaluator, LossOptions, LossReport, LossVariant, MaskField, MsssimParams,
    SimilarityError,
};
use crate::volume::Volume3;

/// Errors from mask optimization.
#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    BadConfig(String),
    #[error("loss evaluation failed at iteration {iteration}: {source}")]
    Evaluation {
        iteration: usize,
        #[source]
        source: SimilarityError,
    },
    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("threshold must be inside (0,1), got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// First-order optimizer settings.
///
/// `seed` keeps runs addressable in sweeps and manifests; the optimizer
/// itself draws no random numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub step_size: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the smoothness penalty in the objective.
    pub lambda_smooth: f64,
    /// Divide the smoothness sum by the voxel count before weighting.
    pub smooth_normalize: bool,
    /// Uniform initial removal probability.
    pub init_delta: f64,
    /// Convergence: |Δtotal| below this ...
    pub conv_tol: f64,
    /// ... for this many consecutive iterations stops early.
    pub conv_window: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            step_size: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda_smooth: 0.05,
            smooth_normalize: true,
            init_delta: 0.1,
            conv_tol: 1e-6,
            conv_window: 20,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |msg: String| Err(OptimError::BadConfig(msg));
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return bad(format!("{name} must be in [0,1), got {b}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda_smooth.is_finite() && self.lambda_smooth >= 0.0) {
            return bad(format!(
                "lambda_smooth must be >= 0, got {}",
                self.lambda_smooth
            ));
        }
        if !(self.init_delta.is_finite() && self.init_delta > 0.0 && self.init_delta < 1.0) {
            return bad(format!(
                "init_delta must be in (0,1), got {}",
                self.init_delta
            ));
        }
        if !(self.conv_tol.is_finite() && self.conv_tol >= 0.0) {
            return bad(format!("conv_tol must be >= 0, got {}", self.conv_tol));
        }
        if self.conv_window == 0 {
            return bad("conv_window must be >= 1".into());
        }
        Ok(())
    }
}

/// Optimizes the removal mask for one volume pair under the default
/// contrast-correlation loss variant.
pub fn optimize_mask(
    rho: &Volume3,
    omega: &Volume3,
    cfg: &OptimConfig,
    p: &MsssimParams,
) -> Result<(MaskField, Vec<LossReport>), OptimError> {
    optimize_mask_variant(rho, omega, cfg, p, LossVariant::MsssimCscc)
}

/// [`optimize_mask`] with an explicit loss variant (for ablations).
pub fn optimize_mask_variant(
    rho: &Volume3,
    omega: &Volume3,
    cfg: &OptimConfig,
    p: &MsssimParams,
    variant: LossVariant,
) -> Result<(MaskField, Vec<LossReport>), OptimError> {
    cfg.validate()?;
    let eval = LossEvaluator::new(
        rho,
        omega,
        p.clone(),
        LossOptions {
            lambda: cfg.lambda_smooth,
            smooth_normalize: cfg.smooth_normalize,
            variant,
        },
    )?;
    let mut mask = MaskField::uniform(rho.dims(), cfg.init_delta)?;
    let n = mask.voxel_count();
    let mut trace: Vec<LossReport> = Vec::new();
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut streak = 0usize;
    let mut last_total: Option<f64> = None;

    for iter in 0..cfg.max_iters {
        let (report, grad) = eval.evaluate(&mask).map_err(|source| match source {
            SimilarityError::NonFinite => OptimError::NonFinite { iteration: iter },
            source => OptimError::Evaluation {
                iteration: iter,
                source,
            },
        })?;
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFinite { iteration: iter });
        }
        if let Some(prev) = last_total {
            if (report.total - prev).abs() < cfg.conv_tol {
                streak += 1;
            } else {
                streak = 0;
            }
        }
        last_total = Some(report.total);
        trace.push(report);
        if streak >= cfg.conv_window || iter + 1 == cfg.max_iters {
            break;
        }

        let t = (iter + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        mask.update_latent(|i, z| {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            z - cfg.step_size * m_hat / (v_hat.sqrt() + cfg.epsilon)
        });
    }
    Ok((mask, trace))
}

/// Binarizes δ at threshold `t` into a 0/1 volume on the given grid.
pub fn threshold_mask(
    delta: &MaskField,
    t: f64,
    spacing_mm: [f64; 3],
) -> Result<Volume3, OptimError> {
    if !(t.is_finite() && t > 0.0 && t < 1.0) {
        return Err(OptimError::BadThreshold(t));
    }
    let data: Vec<f32> = delta
        .delta()
        .iter()
        .map(|&d| if d >= t { 1.0 } else { 0.0 })
        .collect();
    Ok(Volume3::new(delta.dims(), spacing_mm, data).expect("binary data is finite"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_triple, PhantomSpec};
    use crate::similarity::loss_smooth;
    use crate::volume::normalize_intensity;

    fn normalized_pair(spec: &PhantomSpec) -> (Volume3, Volume3, crate::phantom::GroundTruthMask) {
        let (pre, post, gt) = generate_triple(spec).unwrap();
        let pre_n = normalize_intensity(&pre, 0.005, 0.995).unwrap().volume;
        let post_n = normalize_intensity(&post, 0.005, 0.995).unwrap().volume;
        (pre_n, post_n, gt)
    }

    fn small_spec(seed: u64, dims: [usize; 3]) -> PhantomSpec {
        PhantomSpec {
            dims,
            seed,
            removal_radius_frac: [0.30, 0.40],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = OptimConfig::default();
        assert!(ok.validate().is_ok());
        for cfg in [
            OptimConfig {
                max_iters: 0,
                ..OptimConfig::default()
            },
            OptimConfig {
                step_size: 0.0,
                ..OptimConfig::default()
            },
            OptimConfig {
                beta1: 1.0,
                ..OptimConfig::default()
            },
            OptimConfig {
                beta2: -0.1,
                ..OptimConfig::default()
            },
            OptimConfig {
                epsilon: 0.0,
                ..OptimConfig::default()
            },
            OptimConfig {
                lambda_smooth: -1.0,
                ..OptimConfig::default()
            },
            OptimConfig {
                init_delta: 1.0,
                ..OptimConfig::default()
            },
            OptimConfig {
                conv_window: 0,
                ..OptimConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(OptimError::BadConfig(_))));
        }
    }

    #[test]
    fn optimization_is_deterministic_and_decreases_loss() {
        let (pre, post, _) = normalized_pair(&small_spec(11, [16, 16, 8]));
        let cfg = OptimConfig {
            max_iters: 25,
            ..OptimConfig::default()
        };
        let p = MsssimParams::default();
        let (mask_a, trace_a) = optimize_mask(&pre, &post, &cfg, &p).unwrap();
        let (mask_b, trace_b) = optimize_mask(&pre, &post, &cfg, &p).unwrap();
        assert_eq!(mask_a.latent(), mask_b.latent());
        assert_eq!(trace_a.len(), trace_b.len());
        for (a, b) in trace_a.iter().zip(&trace_b) {
            assert_eq!(a.total, b.total);
        }
        assert!(trace_a.last().unwrap().total <= trace_a[0].total);
        assert!(trace_a.len() <= 25);
    }

    #[test]
    fn identical_volumes_keep_mask_low() {
        let (pre, _, _) = normalized_pair(&small_spec(3, [16, 16, 8]));
        let cfg = OptimConfig {
            max_iters: 40,
            ..OptimConfig::default()
        };
        let p = MsssimParams::default();
        let (mask, _) = optimize_mask(&pre, &pre, &cfg, &p).unwrap();
        assert!(
            mask.mean_delta() <= cfg.init_delta + 0.05,
            "mean delta {}",
            mask.mean_delta()
        );
        let bin = threshold_mask(&mask, 0.5, pre.spacing_mm()).unwrap();
        let fg = bin.data().iter().filter(|&&v| v >= 0.5).count();
        assert!(
            (fg as f64) < 0.01 * bin.voxel_count() as f64,
            "thresholded foreground {fg}"
        );
    }

    #[test]
    fn recovers_removal_region_on_noise_free_phantom() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            artifact_count: 0,
            fluid_amplitude: 0.0,
            ..small_spec(5, [32, 32, 16])
        };
        let (pre, post, gt) = normalized_pair(&spec);
        let cfg = OptimConfig::default();
        let p = MsssimParams::default();
        let (mask, trace) = optimize_mask(&pre, &post, &cfg, &p).unwrap();
        assert!(trace.last().unwrap().total <= trace[0].total);
        let bin = threshold_mask(&mask, 0.5, pre.spacing_mm()).unwrap();
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&b, &g) in bin.data().iter().zip(gt.labels()) {
            let b = b >= 0.5;
            match (b, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let dice = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
        assert!(dice >= 0.85, "dice = {dice} (tp={tp}, fp={fp}, fn={fn_})");
    }

    #[test]
    fn strong_regularizer_lowers_smoothness() {
        let (pre, post, _) = normalized_pair(&small_spec(9, [16, 16, 8]));
        let p = MsssimParams::default();
        let base = OptimConfig {
            max_iters: 30,
            ..OptimConfig::default()
        };
        let rough_cfg = OptimConfig {
            lambda_smooth: 0.0,
            ..base.clone()
        };
        let smooth_cfg = OptimConfig {
            lambda_smooth: 10.0,
            ..base
        };
        let (rough, _) = optimize_mask(&pre, &post, &rough_cfg, &p).unwrap();
        let (smooth, _) = optimize_mask(&pre, &post, &smooth_cfg, &p).unwrap();
        let n = rough.voxel_count() as f64;
        let rough_s = loss_smooth(&rough) / n;
        let smooth_s = loss_smooth(&smooth) / n;
        assert!(
            smooth_s < rough_s,
            "normalized smoothness {smooth_s} should be below {rough_s}"
        );
    }

    #[test]
    fn threshold_mask_matches_brute_force() {
        let flat_low = MaskField::uniform([4, 4, 4], 0.1).unwrap();
        let bin = threshold_mask(&flat_low, 0.5, [1.0; 3]).unwrap();
        assert!(bin.data().iter().all(|&v| v == 0.0));

        let flat_high = MaskField::uniform([4, 4, 4], 0.9).unwrap();
        let bin = threshold_mask(&flat_high, 0.5, [1.0; 3]).unwrap();
        assert!(bin.data().iter().all(|&v| v == 1.0));

        let latent: Vec<f64> = (0..64).map(|i| (i as f64 - 32.0) / 8.0).collect();
        let mixed = MaskField::from_latent([4, 4, 4], latent).unwrap();
        let bin = threshold_mask(&mixed, 0.4, [1.0; 3]).unwrap();
        for (&b, &d) in bin.data().iter().zip(mixed.delta()) {
            assert_eq!(b == 1.0, d >= 0.4);
            assert!(b == 0.0 || b == 1.0);
        }

        assert!(matches!(
            threshold_mask(&flat_low, 0.0, [1.0; 3]),
            Err(OptimError::BadThreshold(_))
        ));
        assert!(matches!(
            threshold_mask(&flat_low, 1.0, [1.0; 3]),
            Err(OptimError::BadThreshold(_))
        ));
    }
}
