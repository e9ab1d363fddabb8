//! FAME: a causal self-attention sequential recommender whose last layer
//! predicts per attention head, with a mixture of expert queries inside each
//! head, plus facet-aware contrastive pre-training of item embeddings from
//! text.
//!
//! The crate is dependency-light and CPU-only. All backward passes are
//! hand-derived and checked against [`numerics::finite_difference_gradient`].

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fame;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Param, Rng};
