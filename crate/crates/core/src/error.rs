use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("CDR position {index} out of range for antibody of length {len}")]
    CdrOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: expected {expected} residues, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("time {t} outside the valid range for {what}")]
    InvalidTime { t: f64, what: &'static str },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss {loss} at epoch {epoch}; try a smaller learning rate")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("non-finite coordinates at sampling step {step}")]
    NonFiniteTrajectory { step: usize },

    #[error("non-finite guidance gradient at t={t}")]
    NonFiniteGradient { t: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("arity {arity} exceeds the {available} available CDR positions")]
    ArityTooLarge { arity: usize, available: usize },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: usize },

    #[error("invalid residue code {0:?}")]
    InvalidResidue(char),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::CdrOutOfRange { .. } => "cdr_out_of_range",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidTime { .. } => "invalid_time",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFiniteTrajectory { .. } => "non_finite_trajectory",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Empty(_) => "empty_input",
            Error::ArityTooLarge { .. } => "arity_too_large",
            Error::UnknownId { .. } => "unknown_id",
            Error::InvalidResidue(_) => "invalid_residue",
            Error::Format { .. } => "format",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
