//! Active discovery of symbolic ODE systems.
//!
//! A recurrent policy samples grammar-rule sequences that expand into
//! candidate systems; their constants are fitted to trajectory data; a
//! phase-portrait sketch of the best candidates picks the region of initial
//! conditions where they disagree most, and the data oracle is queried there.
//! Rewards computed on the new data drive a REINFORCE update of the policy.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod constfit;
pub mod decoder;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod sketcher;
pub mod symbolic;

pub use error::{Error, Result};
