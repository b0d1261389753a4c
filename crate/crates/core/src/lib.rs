//! Hard-negative mining and training-data preparation for text embedding
//! models.
//!
//! The crate covers the full offline path: a BM25 index and an exact dense
//! index for first-stage retrieval, a caching client for an external
//! cross-encoder, reciprocal rank fusion of the three channels into teacher
//! scores, margin-based negative mining, instruction-formatted training
//! records, contrastive and distillation objectives with a gradient checker,
//! and Borda-count aggregation of benchmark results.

pub mod config;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub mod forge;
pub mod fusion;
pub mod jsonl;
pub mod lexical;
pub mod loss;
pub mod mining;
pub mod pipeline;
pub mod ranking;
pub mod rerank;

pub use error::{Error, Result};
