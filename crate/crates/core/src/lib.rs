//! Context-influence valuation, selection and surrogate-model tooling for
//! retrieval-augmented generation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod csm;
pub mod error;
pub mod forge;
pub mod gateway;
pub mod harness;
pub mod jsonl;
pub mod losses;
pub mod metrics;
pub mod seeding;
pub mod simgen;
pub mod types;
pub mod valuation;

pub use error::{Error, ErrorClass, Result};
pub use types::*;
