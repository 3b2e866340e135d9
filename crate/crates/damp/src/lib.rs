//! Domain-adaptive coarse-to-fine semantic parsing workbench.
//!
//! The pipeline: ingest multi-domain (utterance, logical form) corpora,
//! induce domain-general sketches from source-domain token sharing, train a
//! two-stage encoder/decoder with adversarial domain discrimination and
//! domain-relevance prior attention, and decode with two-stage beam search.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod infer;
pub mod model;
pub mod numerics;
pub mod relevance;
pub mod sketchlang;
pub mod train;
