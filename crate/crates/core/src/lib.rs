//! Causal autoregressive modeling (CAM) of continuous embedding sequences.
//!
//! A decoder-only transformer consumes noise-augmented embeddings and emits one
//! conditioning vector per position; a small flow-matching head (or a Gaussian
//! mixture head for the GIVT baselines) turns that vector into the next
//! embedding. Training corrupts the model inputs with per-position convex
//! noise so that inference-time feedback of imperfect samples stays
//! in-distribution; generation optionally re-injects a small fixed noise level
//! for the same reason.
//!
//! The crate is self-contained: tensor kernels, a reverse-mode tape for
//! training, synthetic linear-Gaussian data with exact conditional oracles,
//! and distribution-level evaluation metrics all live here. Everything that
//! consumes randomness draws from named [`rng`] substreams of a single master
//! seed, so runs are bit-reproducible across machines and resumable from
//! checkpoints without auxiliary state.

pub mod cli;
pub mod data;
pub mod error;
mod fileio;
pub mod graph;
pub mod inference;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{CamError, Result};
