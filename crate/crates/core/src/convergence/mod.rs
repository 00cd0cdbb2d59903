//! Distributed residual norms and termination detection.

pub mod detect;
pub mod norm;

pub use detect::{Action, Detector, RoundRecord};
pub use norm::{local_accumulate, tree_norm, AccKind, NormAccumulator, NormSpec};
