//! Error type shared across the engine.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! kind of contract that was broken so callers (and tests) can match on the
//! failure class without parsing messages.

use thiserror::Error;

/// Unified error for tensor, sampling, data, evaluation and training code.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or dimensions (matmul mismatch, wrong vector
    /// length, checkpoint/model dimension disagreement).
    #[error("shape error: {0}")]
    Shape(String),

    /// A documented API precondition was violated (non-unit embedding,
    /// backward from a non-scalar, batch too small, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure: zero-norm normalization, overflow, degenerate
    /// distribution.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Loss became NaN during training. Carries the step and the instance
    /// ids of the offending batch so the run can be diagnosed.
    #[error("non-finite loss at step {step}; batch ids {batch_ids:?}")]
    NanLoss { step: u64, batch_ids: Vec<u64> },

    /// Malformed schema file, record, config file or dataset file.
    #[error("parse error: {0}")]
    Parse(String),

    /// The sampler could not produce a batch (e.g. every candidate bucket
    /// in the distance window is empty).
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A metric is undefined on the given input (single-class AUC, all
    /// calibration bins below the minimum count, ...).
    #[error("metric error: {0}")]
    Metric(String),

    /// Invalid input data (empty token sequence, out-of-vocabulary id).
    #[error("input error: {0}")]
    Input(String),

    /// Corrupt or incompatible checkpoint/dataset container.
    #[error("container error: {0}")]
    Container(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(std::io::Error::other(e))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
