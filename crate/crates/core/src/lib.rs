//! Context-affine multi-environment learning.
//!
//! A meta-model `F(x; θ, w) = c(x; θ) + wᵀ v(x; θ)` is trained jointly over
//! several environments of a physical system, then adapted to new
//! environments by least squares, mapped back to physical parameters, and
//! used for adaptive inverse-dynamics control.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod control;
pub mod error;
pub mod experiment;
pub mod identification;
pub mod linalg;
pub mod meta;
pub mod nn;
pub mod systems;

pub use error::{Error, Result};
