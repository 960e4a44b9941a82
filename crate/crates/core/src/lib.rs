//! Normalizing trajectory models: exact-likelihood few-step generative
//! modeling of diffusion reverse conditionals with invertible couplings.

// `!(x > 0.0)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cond;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcore;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod sampling;
pub mod schedule;
pub mod verify;

pub use error::{Error, Result};
pub use gradcore::{Tape, Tensor, Var};
