//! Desk-scale commonsense story generation.
//!
//! The pipeline: train a byte-level BPE tokenizer on a generic corpus,
//! pretrain a small decoder-only transformer language model, post-train it on
//! sentences verbalized from commonsense knowledge triples, fine-tune it with
//! a multi-task objective that pairs language modeling with a 4-way
//! true/fake-story classifier, then generate stories by top-k temperature
//! sampling and score them with a battery of automatic metrics.
//!
//! Everything runs on 64-bit floats with a from-scratch reverse-mode autodiff
//! tape, so gradients are verifiable by finite differences and runs are
//! bit-deterministic given a seed. The `parallel` feature (on by default)
//! uses rayon for the matrix kernels and for per-item batch work; the
//! sequential fallback produces byte-identical results.

pub mod corpus;
pub mod decoding;
pub mod evaluation;
pub mod fixtures;
pub mod knowledge;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub(crate) mod parallel;
pub(crate) mod rng;

pub use rng::derive_rng;
