//! Interpretation networks: map trained λ-net parameters straight to
//! decision-tree surrogates, plus the baselines and tooling around them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cart;
pub mod config;
pub mod data;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod inet;
pub mod ingest;
pub mod lambda;
pub mod nn;
pub mod pipeline;
pub mod sdt;
pub mod seed;
pub mod trees;

pub use error::{Error, ErrorKind, Result};
