use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tensor does not belong to this tape")]
    ForeignTape,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid obfuscation chain: {0}")]
    Obfuscation(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad container {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error("unsupported container version {found} (expected {expected})")]
    ContainerVersion { found: u16, expected: u16 },

    #[error("bad magic in {path}: expected {expected}")]
    Magic { path: PathBuf, expected: String },

    #[error("dataset {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable discriminant, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::ForeignTape => "foreign_tape",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Config(_) => "config",
            Error::Obfuscation(_) => "obfuscation",
            Error::Empty(_) => "empty",
            Error::Container { .. } => "container",
            Error::ContainerVersion { .. } => "container_version",
            Error::Magic { .. } => "magic",
            Error::Dataset { .. } => "dataset",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
