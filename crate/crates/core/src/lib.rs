//! Knowledge-tracing lab.
//!
//! A self-contained pipeline for studying exercise recommendation on a
//! synthetic corpus: corpus generation with a ground-truth student simulator,
//! contrastive text embeddings with false-negative elimination, a recurrent
//! knowledge-tracing model with concept-level calibration, the trained model
//! wrapped as a batched tutoring environment, value-based RL recommenders
//! (including a model-based critic), and the evaluation task suite.
//!
//! The numeric substrate in [`numcore`] is generic over the scalar type via
//! `num-traits`; the rest of the pipeline works in `f64` through the concrete
//! aliases at the crate root.

pub mod agents;
pub mod corpus;
pub mod embed;
pub mod env;
pub mod error;
pub mod kt;
pub mod numcore;
pub mod report;
pub mod tasks;

pub use error::{Error, Result};

/// Scalar used by the concrete pipeline.
pub type Real = f64;
/// Dense matrix over [`Real`].
pub type Tensor = numcore::Tensor<Real>;
/// Reverse-mode tape over [`Real`].
pub type Tape = numcore::Tape<Real>;
/// Adam optimizer over [`Real`].
pub type Adam = numcore::Adam<Real>;
