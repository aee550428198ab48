//! Downstream analysis: sessions keyed by request identifier, semantic
//! feature units per session, recurrent session classifiers for anomaly
//! detection and failure diagnosis, evaluation metrics, and a synthetic log
//! generator that stands in for labelled production data.

mod classifier;
mod metrics;
mod session;
pub mod synth;

use thiserror::Error;

use crate::jparser::ParseError;
use crate::logio::LogIoError;
use crate::neuralcore::NnError;

pub use classifier::{
    stratified_split, train_session_classifier, ClassifierConfig, ClassifierKind, Sample,
    SessionClassifier,
};
pub use metrics::{eval_binary, eval_ci_pairs, recall_at_k, Prf};
pub use session::{
    build_sessions, extract_features, FeatureMode, Session, SessionFeatures, Sessions, Unit,
};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("session has no messages")]
    EmptySession,
    #[error("no training sessions")]
    NoTrainingData,
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("k must be in 1..={classes}, got {k}")]
    BadK { k: usize, classes: usize },
    #[error("feature dimension {found} does not match classifier input {expected}")]
    FeatureDimension { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    LogIo(#[from] LogIoError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
