use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {what} (expected {expected}, got {actual})")]
    Shape {
        what: &'static str,
        expected: Dims,
        actual: Dims,
    },

    #[error("dims {dims} are not divisible by {factor}")]
    Divisibility { dims: Dims, factor: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("time {t} is outside the velocity domain t < 1")]
    TimeDomain { t: f64 },

    #[error("backward called without retained forward activations")]
    StaleActivations,

    #[error("ejection fraction undefined: end-diastolic volume is zero")]
    UndefinedEjectionFraction,

    #[error("myocardial thickness undefined: no slice has myocardium around a left-ventricle cavity")]
    UndefinedThickness,

    #[error("phantom geometry does not fit the grid: {0}")]
    Geometry(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: usize, step: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
