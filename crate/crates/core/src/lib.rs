//! Desk-scale laboratory for studying how tabular regression models behave
//! under heteroscedastic label noise.
//!
//! The crate bundles a minimal dense numerical core with hand-derived
//! backward passes, synthetic dataset generators with known per-sample
//! noise, a small zoo of tabular architectures (MLP, periodic and learned
//! numerical embeddings, a retrieval head, a multi-branch shared-weight
//! ensemble), per-sample data-uncertainty estimation via a heteroscedastic
//! Gaussian model, and the diagnostics built on top: uncertainty plots,
//! neighbor target-consistency curves, and clean/noisy gradient
//! decomposition.

pub mod analysis;
pub mod artifact;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod models;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod svg;
pub mod train;
pub mod tune;
pub mod uncertainty;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::StreamRng;
