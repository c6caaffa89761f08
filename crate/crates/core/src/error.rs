use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("image {height}x{width} is smaller than one {cell}x{cell} cell")]
    TooSmall { height: usize, width: usize, cell: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("timestep {t} out of range [0, {steps})")]
    Range { t: usize, steps: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("foreground does not fit inside the frame: {0}")]
    Placement(String),
    #[error("class coverage: {0}")]
    Coverage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Stable identifier used in machine-parsable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyMask => "empty_mask",
            Error::TooSmall { .. } => "too_small",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Range { .. } => "range",
            Error::State(_) => "state",
            Error::Input(_) => "input",
            Error::Placement(_) => "placement",
            Error::Coverage(_) => "coverage",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Json(_) => "json",
        }
    }
}
