//! In-context k-gram estimation with small transformers: explicit weight
//! constructions, a brute-force oracle, Markov data, training, and analysis.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod analysis;
pub mod cli;
pub mod constructions;
pub mod markov;
pub mod model;
pub mod oracle;
pub mod train;
