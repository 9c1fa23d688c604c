//! Library side of the `estimator` command: job configs, CSV input and the
//! subcommands themselves. The binary only parses flags and maps errors to
//! exit codes.

pub mod commands;
pub mod config;
pub mod dataset;

pub use config::{DataConfig, JobConfig};
pub use dataset::{ColumnKind, CsvDataset};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NAN: u8 = 3;

/// Config and schema problems exit 2, a diverged loss 3, anything else 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Data(_) => EXIT_FAILURE,
            };
        }
        if let Some(e) = cause.downcast_ref::<estimator::Error>() {
            return match e {
                estimator::Error::Config(_) | estimator::Error::RunConfigNotSet => EXIT_CONFIG,
                estimator::Error::NanLoss { .. } => EXIT_NAN,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}
