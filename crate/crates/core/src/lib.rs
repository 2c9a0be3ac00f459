//! Turn a tiny decoder-only transformer into a dense retriever with
//! unsupervised contrastive learning: random-crop positives, BM25-mined hard
//! negatives, EOS pooling and an InfoNCE objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: documents, vocabulary, tokenization
//! - [`sparse`]: BM25 inverted index and hard-negative mining
//! - [`augment`]: contrastive pair construction
//! - [`tensor`]: dense arrays with reverse-mode autodiff
//! - [`model`]: decoder-only transformer with RoPE, LoRA and checkpoints
//! - [`train`]: InfoNCE loss, AdamW and the training loop
//! - [`dense`]: embedding index, exact search and retrieval metrics
//! - [`experiments`]: synthetic corpora and the study drivers
//! - [`cli`]: the `llm2ir` command line

pub mod augment;
pub mod cli;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod experiments;
pub mod model;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
