//! Desk-scale simulator for federated two-tower contrastive pre-training
//! under client data heterogeneity.
//!
//! The library provides dense two-tower encoder/aligner networks with exact
//! reverse-mode gradients, the guidance-regularized local losses, a
//! chi-square-ball DRO client weighting engine, Dirichlet-partitioned
//! synthetic multimodal data, the two-stage federated round protocol with
//! FedAvg/centralized/decentralized baselines, retrieval evaluation, and
//! numerical verifiers for the underlying generalization bounds.

pub mod bounds;
pub mod config;
pub mod data;
pub mod dro;
pub mod evaluation;
pub mod federation;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod persist;
pub mod rng;

pub use config::ExperimentConfig;
pub use matrix::Matrix;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("degenerate partition — reseed (client {0} received no samples)")]
    DegeneratePartition(usize),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
