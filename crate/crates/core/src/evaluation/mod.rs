//! Monte-Carlo predictive evaluation, error metrics, transfer-gain
//! analysis, and stochastic-process property checks.
//!
//! [`metrics`] scores trained models over seeded context draws and writes
//! the metrics CSV; [`transfer`] measures how observing source tasks moves
//! target-task error; [`process`] verifies the exchangeability and
//! consistency properties that any model over function sets must satisfy.

pub mod metrics;
pub mod process;
pub mod transfer;

pub use metrics::{
    aggregate, evaluate, mc_predictive, mse, nll_metric, normalized_mse, write_metrics_csv,
    EvalMode, EvalProtocol, EvalTags, McOptions, McPrediction, MetricsRow, MetricsSummary,
};
pub use process::{
    check_consistency, check_exchangeability, model_predictor, ProcessReport,
    CONSISTENCY_TOL, EXCHANGEABILITY_TOL,
};
pub use transfer::{
    source_subsets, transfer_gain, transfer_matrix, write_transfer_csv, PairGain, TransferCell,
    TransferProtocol, TransferReport, TransferRow,
};

use crate::datasets::DataError;
use crate::models::ModelError;
use std::fmt;

/// Errors raised by evaluation routines.
#[derive(Debug)]
pub enum EvalError {
    Model(ModelError),
    Data(DataError),
    /// A metric's precondition fails (zero normalization scale, no samples).
    Domain { message: String },
    /// A protocol precondition fails (target listed among sources).
    Protocol { message: String },
    Io(std::io::Error),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Data(e) => write!(f, "{e}"),
            EvalError::Domain { message } => write!(f, "metric domain error: {message}"),
            EvalError::Protocol { message } => write!(f, "protocol error: {message}"),
            EvalError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e)
    }
}
