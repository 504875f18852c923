//! Confidentiality-preserving distributed chance-constrained optimal power
//! flow across regional system operators.
//!
//! Each region keeps its generation costs, limits, loads and line data
//! private. Regions encrypt their decision variables and constraint blocks
//! with private invertible matrices, exchange only masked data over a
//! consensus network, and every region then solves the same encrypted
//! quadratic program and decrypts its own schedule.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod central;
pub mod consensus;
pub mod dist_inverse;
pub mod dlpf;
pub mod error;
pub mod grid_case;
mod matpower;
pub mod qp;
pub mod te;
pub mod wind;

pub use error::{Error, Result};
