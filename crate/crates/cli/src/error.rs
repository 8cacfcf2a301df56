use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Missing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is not empty; pass --force to overwrite")]
    Refused(PathBuf),
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] pass_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub mod exit {
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INPUT: i32 = 4;
    pub const ENGINE: i32 = 5;
    pub const REFUSED: i32 = 6;
    pub const CHECK: i32 = 7;
}

impl CliError {
    pub fn missing(path: &Path, source: std::io::Error) -> Self {
        CliError::Missing {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use pass_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Missing { .. } | CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => exit::INPUT,
            CliError::Refused(_) => exit::REFUSED,
            CliError::CheckFailed(_) => exit::CHECK,
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::InvalidSpec(_) | E::InvalidK { .. } | E::InvalidPrior(_) => exit::CONFIG,
                E::Io(_) | E::Format { .. } | E::Image(_) | E::Json(_) | E::Csv(_) => exit::INPUT,
                _ => exit::ENGINE,
            },
        }
    }
}
