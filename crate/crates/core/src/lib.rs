//! Capsule-network scoring of `(subject, relation, object)` triples.
//!
//! The crate is organised around the pipeline it serves:
//!
//! * [`kg`] loads triple files, builds vocabularies, computes per-relation
//!   multiplicity statistics and draws Bernoulli negative samples.
//! * [`embed`] holds entity/relation embedding tables, their initialisers and
//!   a TransE trainer used to pretrain them.
//! * [`model`] is the capsule scorer itself: convolution, capsule regrouping,
//!   squash, routing, the softplus loss, hand-written gradients, Adam and the
//!   training loop. A ConvKB scorer sharing the convolution lives next to it.
//! * [`eval`] runs the filtered ranking protocol (MR, MRR, Hits@k) with
//!   per-relation and per-category breakdowns.
//! * [`rerank`] adapts the scorer to personalised re-ranking of search
//!   results over `(query, user, document)` triples.
//! * [`checkpoint`] reads and writes the plain-text model format.

// Negated comparisons such as `!(lr > 0.0)` deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod embed;
mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod rerank;
pub mod toy;

pub use error::{Error, Result};
