//! hekp4nbr: next-basket recommendation from knowledge-tree prompts,
//! hypergraph item relations and frequency-based gating.
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`corpus`] — event ingestion, preprocessing, splits, synthetic data
//! - [`knowledge`] — knowledge graph, prompt rendering, tokenizer
//! - [`tensor`] — dense tensors, reverse-mode autodiff, AdamW
//! - [`seqenc`] — compact encoder-decoder over prompt tokens
//! - [`relenc`] — bipartite GCN, MoE similarity, hypergraph convolution
//! - [`head`] — frequency-gated scoring, joint loss, training loop
//! - [`eval`] — F1/HR/NDCG@k and the evaluation harness
//! - [`config`] — flat key=value configuration
//! - [`checkpoint`] — portable binary checkpoints

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod head;
pub mod knowledge;
pub mod relenc;
pub mod rng;
pub mod seqenc;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
