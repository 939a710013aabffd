use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{0}")]
    Core(#[from] gkm_core::Error),

    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 0 success, 2 divergence, 3 format error, 4 missing artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 3,
            Self::MissingArtifact(_) => 4,
            Self::Core(gkm_core::Error::Divergence { .. }) => 2,
            Self::Core(gkm_core::Error::Format(_)) => 3,
            Self::Core(_) | Self::Check(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reads a required input file, reporting absence as a missing artifact.
pub fn read_artifact(path: &std::path::Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingArtifact(path.to_path_buf()),
        _ => CliError::Core(e.into()),
    })
}
