//! Hierarchical memory network for detecting temporally incoherent face
//! sequences from per-frame patch embeddings.
//!
//! The network keeps a FIFO of raw patch-embedding grids, reads it through
//! three tiers of attention (input patches, stored patches, stored frames),
//! classifies each frame as real or fake and predicts the embedding grid a
//! fixed number of frames ahead. Training couples classification with a
//! conditional adversarial objective on the predicted embeddings.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which is what the command-line
//! tool and the test suite use.

pub mod attention;
pub mod baselines;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape64 = numerics::Tape<f64>;
pub type FeatureGrid64 = memory::FeatureGrid<f64>;
pub type MemoryState64 = memory::MemoryState<f64>;
pub type HmnParams64 = model::HmnParams<f64>;
pub type Discriminator64 = training::Discriminator<f64>;
pub type Episode64 = data::Episode<f64>;

pub type Tensor32 = numerics::Tensor<f32>;
pub type HmnParams32 = model::HmnParams<f32>;
