//! Slot-level CKKS execution model and private embedding-lookup algorithms.
//!
//! The crate simulates CKKS at slot granularity: ciphertexts are vectors of
//! real slots with exact multiplicative-level bookkeeping, and every
//! homomorphic op lands in an append-only ledger. On top of the model sit
//! the linear-algebra kernels (Halevi-Shoup and BSGS diagonal products),
//! client-side digit-decomposition compression with block-diagonal
//! multi-table packing, the indicator-function lookup baseline it is
//! compared against, an end-to-end recommendation-model inference pipeline,
//! and sequence-embedding analyses for language models. A calibrated cost
//! table translates ledgers into latency estimates.

pub mod baseline;
pub mod cheb;
pub mod compare;
pub mod cost;
pub mod dlrm;
pub mod embedding;
pub mod error;
pub mod ledger;
pub mod linalg;
pub mod llm;
pub mod vm;

pub use error::{Error, Result};
