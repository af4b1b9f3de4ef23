//! Desk-scale two-phase one-step distillation for flow-matching video models.
//!
//! The crate trains a small spatiotemporal velocity network on synthetic
//! moving-blob clips, then distills it into a one-step generator in two
//! phases: distribution-matching priming followed by self-adversarial
//! equilibrium with an EMA-shared discriminator backbone. Baseline
//! distillation methods, analytic oracles and an experiment runner are
//! included so method orderings can be reproduced end to end.

pub mod baselines;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod eval;
pub mod flow;
pub mod nets;
pub mod optim;
pub mod phase1;
pub mod phase2;
pub mod report;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use tensor::Tensor;

/// Crate-level error type shared by training and I/O paths.
#[derive(Debug, thiserror::Error)]
pub enum PoseError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("noise level t=0 not allowed: {0}")]
    ZeroNoiseLevel(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PoseError>;
