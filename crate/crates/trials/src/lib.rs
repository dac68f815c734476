//! HTTP service for the human fall-prediction experiment: 50 training
//! trials with feedback, then 100 test trials without, each session stored
//! as one JSON file.

pub mod report;
pub mod routes;
pub mod service;
pub mod session;

use thiserror::Error;

pub use report::{AggregateReport, RecordInfo, SessionResults};
pub use routes::router;
pub use service::{model_confidences, Feedback, TrialService, TrialView};
pub use session::{Answer, Phase, Session, N_TEST, N_TRAINING, N_TRIALS};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("dataset has {available} test records, a session needs {needed}")]
    InsufficientDataset { available: usize, needed: usize },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session is complete")]
    SessionComplete,
    #[error("no pending trial")]
    NoPendingTrial,
    #[error("bad prediction: {0}")]
    BadPrediction(String),
    #[error("session incomplete: {answered} of 150 trials answered")]
    SessionIncomplete { answered: usize },
    #[error("no complete sessions")]
    NoCompleteSessions,
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl TrialError {
    /// Stable name used in error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            TrialError::InsufficientDataset { .. } => "InsufficientDataset",
            TrialError::UnknownSession(_) => "UnknownSession",
            TrialError::SessionComplete => "SessionComplete",
            TrialError::NoPendingTrial => "NoPendingTrial",
            TrialError::BadPrediction(_) => "BadPrediction",
            TrialError::SessionIncomplete { .. } => "SessionIncomplete",
            TrialError::NoCompleteSessions => "NoCompleteSessions",
            TrialError::UnknownImage(_) => "UnknownImage",
            TrialError::BadRequest(_) => "BadRequest",
            TrialError::Dataset(_) => "Dataset",
            TrialError::Storage(_) => "Storage",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            TrialError::InsufficientDataset { .. } | TrialError::NoPendingTrial | TrialError::SessionIncomplete { .. } => 409,
            TrialError::UnknownSession(_) | TrialError::NoCompleteSessions | TrialError::UnknownImage(_) => 404,
            TrialError::SessionComplete => 410,
            TrialError::BadPrediction(_) | TrialError::BadRequest(_) => 400,
            TrialError::Dataset(_) | TrialError::Storage(_) => 500,
        }
    }
}
