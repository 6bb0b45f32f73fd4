use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the zero-norm threshold")]
    ZeroNorm { norm: f64 },

    #[error("input vector is not unit-norm (norm = {norm})")]
    NotNormalized { norm: f64 },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("interpolation coefficient {0} outside [0, 1]")]
    CoeffOutOfRange(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("method {method} requires the {component} component")]
    MissingComponent {
        method: &'static str,
        component: &'static str,
    },

    #[error("method {method} does not define a {component} component")]
    IncompatibleComponent {
        method: &'static str,
        component: &'static str,
    },

    #[error("no cached pre-trained embedding for reference sample {0}")]
    MissingCache(usize),

    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("method {0} needs a reference dataset")]
    MissingReferenceDataset(&'static str),

    #[error("invalid training config: {0}")]
    ConfigInvalid(String),

    #[error("invalid world spec: {0}")]
    SpecInvalid(String),

    #[error("pre-training reached zero-shot accuracy {achieved:.4} below the floor {floor:.4}")]
    PretrainFailed { achieved: f64, floor: f64 },

    #[error("ensemble grid is empty")]
    EmptyGrid,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroNorm { .. } => "ZeroNorm",
            Error::NotNormalized { .. } => "NotNormalized",
            Error::DegenerateVariance(_) => "DegenerateVariance",
            Error::NonFinite(_) => "NonFinite",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::CoeffOutOfRange(_) => "CoeffOutOfRange",
            Error::EmptyBatch => "EmptyBatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::MissingComponent { .. } => "MissingComponent",
            Error::IncompatibleComponent { .. } => "IncompatibleComponent",
            Error::MissingCache(_) => "MissingCache",
            Error::TooFew { .. } => "TooFew",
            Error::EmptyDataset => "EmptyDataset",
            Error::MissingReferenceDataset(_) => "MissingReferenceDataset",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::SpecInvalid(_) => "SpecInvalid",
            Error::PretrainFailed { .. } => "PretrainFailed",
            Error::EmptyGrid => "EmptyGrid",
            Error::Format(_) => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
