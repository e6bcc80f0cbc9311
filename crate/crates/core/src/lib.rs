//! Long-tail query rewriting for exact-match product search.
//!
//! The crate covers the whole offline loop:
//!
//! - [`corpus`]: catalog, query logs and a deterministic synthetic world generator
//! - [`lexindex`]: inverted index with conjunctive matching and query segmentation
//! - [`feedback`]: relevance / increment / hitrate scores computed from offline retrieval
//! - [`datasetgen`]: rejection-sampled rewrite data plus auxiliary instruction tasks
//! - [`model`]: a compact autoregressive rewriter with masked NLL training and beam search
//! - [`alignment`]: Bradley-Terry / preference-rank (PRO) alignment on feedback-ranked lists
//! - [`serving`]: offline batch rewriting into a key-value table and union retrieval

pub mod alignment;
pub mod corpus;
pub mod datasetgen;
pub mod feedback;
pub mod jsonl;
pub mod lexindex;
pub mod model;
pub mod serving;

mod error;

pub use error::{Error, Result};
