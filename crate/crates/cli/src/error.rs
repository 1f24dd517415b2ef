use std::process::ExitCode;

use plexus_core::checkpoint::CheckpointError;
use plexus_core::config::ConfigError;
use plexus_core::cv::CvError;
use plexus_core::eval::EvalError;
use plexus_core::head::HeadError;
use plexus_core::image::ImageError;
use plexus_core::stain::StainError;
use plexus_core::store::StoreError;
use plexus_core::tiler::TileError;
use plexus_core::train::TrainError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Mismatch(_) => 4,
        })
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(StoreError, ImageError, StainError, TileError, HeadError, EvalError, CheckpointError, std::io::Error);

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CvError> for CliError {
    fn from(e: CvError) -> Self {
        match e {
            CvError::Train(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}
