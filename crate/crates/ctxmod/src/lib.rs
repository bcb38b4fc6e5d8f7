//! File formats, parallel job orchestration and report writers around
//! `ctxmod-core`. The `ctxmod` binary is a thin CLI over this crate.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod container;
pub mod jobs;
pub mod manifest;
pub mod report;
pub mod synth;

/// Failures reading or writing on-disk artifacts.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch in {}: expected {expected:08x}, found {found:08x}", file.display())]
    Checksum { file: PathBuf, expected: u32, found: u32 },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] ctxmod_core::Error),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
