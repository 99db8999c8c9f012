//! The single JSON configuration document shared by all subcommands.
//!
//! Every field has a default, so an absent `--config` runs the stock
//! pipeline; unknown keys are rejected to guard against silent typos. The
//! `--seed` flag overrides both the phantom seed and the optimizer seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use resect_core::optimize::OptimConfig;
use resect_core::phantom::PhantomSpec;
use resect_core::similarity::{LossVariant, MsssimParams};

use crate::errors::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Rigidly align the postoperative volume before optimization.
    pub enabled: bool,
    /// Pyramid levels of the registration search.
    pub levels: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            levels: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub phantom: PhantomSpec,
    pub registration: RegistrationConfig,
    pub optimizer: OptimConfig,
    pub msssim: MsssimParams,
    pub loss_variant: LossVariant,
    /// Probability threshold that binarizes δ for evaluation.
    pub eval_threshold: f64,
    /// Iso level for the masked-volume mesh.
    pub mesh_iso: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            phantom: PhantomSpec::default(),
            registration: RegistrationConfig::default(),
            optimizer: OptimConfig::default(),
            msssim: MsssimParams::default(),
            loss_variant: LossVariant::default(),
            eval_threshold: 0.5,
            mesh_iso: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.phantom
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.msssim
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.registration.levels == 0 {
            return Err(CliError::Config(
                "registration.levels must be >= 1".into(),
            ));
        }
        if !(self.eval_threshold.is_finite()
            && self.eval_threshold > 0.0
            && self.eval_threshold < 1.0)
        {
            return Err(CliError::Config(format!(
                "eval_threshold must be inside (0,1), got {}",
                self.eval_threshold
            )));
        }
        if !self.mesh_iso.is_finite() {
            return Err(CliError::Config(format!(
                "mesh_iso must be finite, got {}",
                self.mesh_iso
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phantom.seed = seed;
        self.optimizer.seed = seed;
        self
    }
}

/// Loads and validates the config; `None` yields the defaults.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<PipelineConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}
