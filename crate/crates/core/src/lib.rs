//! Decentralized parallel SGD with weighted aggregation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod models;
pub mod ordering;
pub mod par;
pub mod protocol;
pub mod rng;
pub mod variance;
pub mod weighting;

pub use error::{Error, Result};
