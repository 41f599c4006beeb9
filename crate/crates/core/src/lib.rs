//! Review-matching recommender: users and items are represented by the text
//! of their reviews, a pairwise word-similarity matrix joins the two
//! documents, and a small CNN regresses the rating from that matrix.
//!
//! The crate is organized along the pipeline:
//!
//! - [`corpus`] — review parsing, dataset splitting, document construction
//! - [`embeddings`] — word vectors, OOV policy, cosine similarity
//! - [`matching`] — the capped cosine matching matrix
//! - [`model`] — the CNN regressor, forward and hand-derived backward pass
//! - [`training`] — MSE loss, Adam, minibatch loop with early stopping
//! - [`experiments`] — evaluation, shuffle and sparsity studies, paired t-test

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod matching;
pub mod model;
pub mod training;

pub use error::{Error, Result};
