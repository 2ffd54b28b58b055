//! Manifests, folder ingestion, checkpoints, reports and the synthetic corpus.

use std::path::PathBuf;

use thiserror::Error;

use crate::imaging::ImagingError;

pub mod annotations;
pub mod checkpoint;
pub mod manifest;
pub mod synth;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error("invalid manifest {path}: {}", .problems.join("; "))]
    Manifest { path: PathBuf, problems: Vec<String> },
    #[error("checkpoint: bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(String),
    #[error("checkpoint: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Integrity { stored: u32, computed: u32 },
    #[error("checkpoint: {0}")]
    Format(String),
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// Pretty JSON with struct fields in declaration order and a trailing newline.
pub fn report_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialise");
    s.push('\n');
    s
}

pub fn write_report<T: serde::Serialize>(value: &T, path: &std::path::Path) -> Result<(), DataError> {
    std::fs::write(path, report_json(value)).map_err(io_err(path))
}
