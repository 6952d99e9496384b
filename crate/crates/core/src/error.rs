use thiserror::Error;

use crate::loss::LossReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error in {op} (operand {operand}): {detail}")]
    Domain {
        op: &'static str,
        operand: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix is not positive definite (failed at pivot {0})")]
    NotPositiveDefinite(usize),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence {
        epoch: usize,
        last_finite: Option<Box<LossReport>>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(op: &'static str, operand: usize, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            operand,
            detail: detail.into(),
        }
    }
}
