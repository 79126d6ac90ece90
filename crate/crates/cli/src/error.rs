//! CLI errors mapped onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration; carries the offending field path. Exit code 2.
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    /// Runtime failure inside a command. Exit code 1.
    #[error("{0}")]
    Runtime(#[from] dlf_core::DlfError),

    /// Gradient check exceeded its tolerances. Exit code 3.
    #[error("gradient check failed: max rel err {max_rel_err:.3e} (limit {rel_limit:.3e}), cosine {cosine:.6} (limit {cos_limit:.6})")]
    Tolerance {
        max_rel_err: f64,
        rel_limit: f64,
        cosine: f64,
        cos_limit: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
            CliError::Tolerance { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
