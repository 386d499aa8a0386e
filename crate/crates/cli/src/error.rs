use std::path::PathBuf;
use std::process::ExitCode;

use mixco_core::MixcoError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] MixcoError),

    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{} is held by another run (remove it if that run is gone)", path.display())]
    Locked { path: PathBuf },

    #[error("gradient check failed: worst relative error {0:e}")]
    GradCheck(f64),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage or configuration, 2 divergence or failed numeric check, 3 I/O.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                MixcoError::Config(_) | MixcoError::Contract(_) | MixcoError::Dimension { .. } => 1,
                MixcoError::Diverged(_) | MixcoError::Domain(_) => 2,
                MixcoError::Format { .. } | MixcoError::Io { .. } => 3,
            },
            CliError::GradCheck(_) => 2,
            CliError::Io { .. } | CliError::Locked { .. } => 3,
        };
        ExitCode::from(code)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
