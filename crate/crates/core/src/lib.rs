//! Token Pooling: clustering-based downsampling of transformer token sets.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] dense matrices, softmax, distances and a reproducible RNG.
//! * [`transformer`] forward-only transformer blocks (standard, normalized
//!   query/key and carry-count attention).
//! * [`scoring`] significance scores computed from attention maps.
//! * [`pooling`] K-Means / K-Medoids token pooling (weighted and unweighted)
//!   and the random, importance and grid baselines.
//! * [`costmodel`] exact flop accounting for ViT/DeiT style models.
//! * [`filterlab`] numerical check that normalized softmax attention is a
//!   Gaussian filter of the value signal.
//! * [`io`] matrix, config and schedule file formats.
//! * [`pipeline`] multi-block forward pass with pooling after each block.

pub mod costmodel;
pub mod error;
pub mod filterlab;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod pooling;
pub mod scoring;
pub mod transformer;

pub use costmodel::{FlopReport, ModelConfig};
pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
pub use transformer::{AttentionMode, TokenSet};
