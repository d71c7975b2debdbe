use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("boundary shift infeasible: {0}")]
    InfeasibleBoundary(String),

    #[error("crop window lies entirely outside the image")]
    EmptyCrop,

    #[error("object token mask is empty")]
    EmptyObject,

    #[error("no distractor available for object {0}")]
    NoDistractor(String),

    #[error("distractor footprint {footprint_rows}x{footprint_cols} exceeds {rows}x{cols} grid")]
    FootprintTooLarge {
        footprint_rows: usize,
        footprint_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("sequence `{sequence}`: {message}")]
    Structural { sequence: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
