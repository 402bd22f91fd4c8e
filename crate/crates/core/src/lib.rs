//! Attention-based sequence-to-sequence translation, built from first
//! principles on a small reverse-mode differentiation tape.
//!
//! The crate is `no_std` (alloc required): everything here is pure
//! computation over `f64` buffers. File formats, the CLI, and all IO live
//! in the companion `gatt-cli` crate.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`param`], [`rng`]: dense rank-0/1/2 tensors,
//!   the op tape with backward, parameter storage with Adadelta and
//!   gradient clipping, and a reproducible RNG.
//! - [`layers`]: GRU cell, embeddings, bidirectional encoder, readout.
//! - [`attention`]: vanilla attention, the GRU gating layer, and the two
//!   gated variants.
//! - [`seq2seq`]: model assembly, teacher-forced loss, ensembles.
//! - [`decode`]: greedy and beam search.
//! - [`data`]: synthetic corpora with gold alignments, vocabularies,
//!   batching.
//! - [`metrics`]: BLEU, n-gram repetition rate, AER, context-vector
//!   variance, heatmap rendering.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod data;
pub mod decode;
mod error;
pub mod layers;
pub mod metrics;
pub mod param;
pub mod rng;
pub mod seq2seq;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
