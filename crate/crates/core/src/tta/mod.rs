//! Test-time refinement by marginal-entropy minimization over augmentations.

pub mod augment;
pub mod engine;

pub use augment::{augment, AugmentationPolicy, Transform};
pub use engine::{
    adapt_on_batch, batch_log_csv, marginal_distribution, predict_batch, predict_with_reset, BatchLog, PredictFrom,
    ResetPolicy, TtaConfig, TtaOutput,
};
