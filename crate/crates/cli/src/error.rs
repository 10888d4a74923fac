use std::path::Path;

use geoflow::adapter::AdapterError;
use geoflow::grpo::GrpoError;
use geoflow::metrics::MetricsError;
use geoflow::policy::PolicyError;
use geoflow::reward::RewardError;
use geoflow::synth::SynthError;
use thiserror::Error;

/// Every failure the CLI reports, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configs or input files: exit code 2.
    #[error("{0}")]
    Input(String),
    /// Numeric breakdown or diverged training: exit code 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }

    pub fn json(path: &Path, err: serde_json::Error) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::NonFinite { .. } | RewardError::EmptyMask(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Numeric(_) | PolicyError::Training(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Numeric(_) | MetricsError::Degenerate(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Config(_) | GrpoError::Synth(_) => CliError::Input(e.to_string()),
            GrpoError::Policy(p) => p.into(),
            GrpoError::Reward(r) => r.into(),
            GrpoError::DegenerateDecode { .. } | GrpoError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}
