use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate dose column: all doses equal {0}")]
    DegenerateDose(f64),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate propensity model: dose residuals have zero variance")]
    DegeneratePropensity,

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("degenerate kernel row: weights must be nonnegative with positive sum")]
    DegenerateKernel,

    #[error("bandwidth selection failed: every candidate produced a leverage of one or more")]
    BandwidthSelection,

    #[error("kernel calibration failed for row {row}: target row sum {target} unreachable")]
    KernelCalibration { row: usize, target: f64 },

    #[error("empty node: cannot optimize a dose over zero samples")]
    EmptyNode,

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable identifier used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::InvalidData(_) => "invalid_data",
            Error::Domain(_) => "domain",
            Error::DegenerateDose(_) => "degenerate_dose",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::DegeneratePropensity => "degenerate_propensity",
            Error::Shape { .. } => "shape",
            Error::DegenerateKernel => "degenerate_kernel",
            Error::BandwidthSelection => "bandwidth_selection",
            Error::KernelCalibration { .. } => "kernel_calibration",
            Error::EmptyNode => "empty_node",
            Error::Stage { source, .. } => source.kind(),
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Serialization(_) => "serialization",
        }
    }

    /// True for errors caused by the input data files rather than the pipeline.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::InvalidData(_)
            | Error::DegenerateDose(_)
            | Error::Io { .. } => true,
            Error::Stage { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
