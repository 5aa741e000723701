//! Distantly supervised named entity recognition at the span level.
//!
//! The pipeline has a training side and a prediction side:
//!
//! - [`lexicon`] extends a typed dictionary with untyped phrases by matching
//!   their headwords against frequent dictionary headwords in embedding space,
//!   and maps the resulting similarity to an annotation weight.
//! - [`annotate`] pseudo-annotates raw sentences with the extended dictionary
//!   (greedy longest match, weighted multi-type spans) and samples negatives.
//! - [`model`] is a span classifier: token encoder, self-attention pooling over
//!   left context / span / right context, and a softmax over type embeddings,
//!   trained with a weighted cross-entropy loss and Adam.
//! - [`inference`] scores every span of up to `M` tokens and picks the
//!   partition of the sentence minimising the total log-probability of the
//!   none type, then labels each chosen span.
//! - [`eval`] computes entity-level micro precision/recall/F1 with an
//!   in-dictionary / out-of-dictionary breakdown.
//!
//! Token indices are 1-based and inclusive throughout the public API.

pub mod annotate;
pub mod cli;
pub mod corpus;
pub mod embedding;
mod error;
pub mod eval;
pub mod inference;
pub mod lexicon;
pub mod model;
pub mod synthetic;

pub use error::{Error, Result};
