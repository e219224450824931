//! Sequence labelling as sentinel-interleaved sequence-to-sequence scoring.
//!
//! The crate is organised bottom-up:
//!
//! - [`sbio`]: the simplified-inside BIO tag scheme and the sentinel string formats.
//! - [`corpus`]: CoNLL ingestion, downsampling, deduplication and a synthetic corpus.
//! - [`nn`]: a small reverse-mode autodiff tape, LSTM blocks, losses and AdamW.
//! - [`scorer`]: the scorer contract (table, toy encoder-decoder teacher, remote peer).
//! - [`decoder`]: constrained tag-wise beam search over scorer likelihoods.
//! - [`distill`]: the BiLSTM student and the pseudo-label / KL distillation objective.
//! - [`metrics`]: span micro-F1 and sentence-level exact match.
//! - [`harness`]: experiment configuration, the ablation grid and reporting.

pub mod corpus;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod sbio;
pub mod scorer;

pub use error::{Error, Result};
