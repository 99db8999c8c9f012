//! CLI error classification onto process exit codes.
//!
//! 2 = configuration or usage problem, 3 = numerical or data-dependent
//! failure, 4 = file-system / file-format failure. Library errors map here
//! by what the user can do about them: fix the config, inspect the data, or
//! fix the files.

use std::fmt;

use resect_core::mesh::MeshError;
use resect_core::metrics::MetricsError;
use resect_core::optimize::OptimError;
use resect_core::phantom::PhantomError;
use resect_core::registration::RegistrationError;
use resect_core::similarity::SimilarityError;
use resect_core::volume::VolumeError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config contents, or mutually inconsistent inputs.
    Config(String),
    /// The computation itself failed (degenerate data, divergence, ...).
    Numeric(String),
    /// Missing, unreadable, unwritable, or malformed files.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<VolumeError> for CliError {
    // Volume errors in CLI context come from reading/writing volume files.
    fn from(e: VolumeError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<RegistrationError> for CliError {
    fn from(e: RegistrationError) -> Self {
        match e {
            RegistrationError::DimsMismatch { .. } | RegistrationError::NoLevels => {
                CliError::Config(e.to_string())
            }
            RegistrationError::ZeroVariance => CliError::Numeric(e.to_string()),
            RegistrationError::Volume(v) => v.into(),
        }
    }
}

impl From<SimilarityError> for CliError {
    fn from(e: SimilarityError) -> Self {
        match e {
            SimilarityError::DimsMismatch { .. }
            | SimilarityError::VolumeTooSmall { .. }
            | SimilarityError::BadParams(_) => CliError::Config(e.to_string()),
            SimilarityError::ZeroVariance
            | SimilarityError::NonPositiveBase { .. }
            | SimilarityError::NonFinite => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::BadConfig(_) | OptimError::BadThreshold(_) => {
                CliError::Config(e.to_string())
            }
            OptimError::Similarity(s) => s.into(),
            OptimError::Evaluation { ref source, .. } => match source {
                SimilarityError::DimsMismatch { .. }
                | SimilarityError::VolumeTooSmall { .. }
                | SimilarityError::BadParams(_) => CliError::Config(e.to_string()),
                _ => CliError::Numeric(e.to_string()),
            },
            OptimError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::DimsMismatch { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::BadIso(_) => CliError::Config(e.to_string()),
            MeshError::Io(io) => CliError::Io(io.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
