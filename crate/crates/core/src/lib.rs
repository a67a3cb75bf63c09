//! Deep linear networks trained on matrix completion: SGD dynamics, absorbing sets `B_r`,
//! representation-cost identities, landscape diagnostics and toy-experiment reproduction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod absorbing;
pub mod error;
pub mod experiment;
pub mod landscape;
pub mod linalg;
pub mod linnet;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod verify;

pub use error::{Error, Result};
