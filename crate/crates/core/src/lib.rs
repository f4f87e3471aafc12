//! Desk-scale laboratory for invariance-regularized unlearning: toy models
//! with analytic gradients, the unlearning loss family, the scalar-predictor
//! invariance penalty, synthetic multi-domain corpora, deterministic
//! training loops, fine-tuning/relearning attacks, and task-vector
//! diagnostics.

pub mod error;
pub mod numcore;

pub mod attacks;
pub mod datasets;
pub mod invariance;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod taskvec;
pub mod trainer;

pub use error::{Error, Result};
