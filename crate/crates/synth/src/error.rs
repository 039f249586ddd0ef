use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample `{id}`: cannot read image {path}: {source}")]
    Image {
        id: String,
        path: PathBuf,
        source: transvg_core::Error,
    },
    #[error(transparent)]
    Core(#[from] transvg_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;
