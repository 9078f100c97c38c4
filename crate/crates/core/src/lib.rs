//! Vanilla ReLU deep equilibrium models and the tooling to study their
//! training dynamics at initialization and during gradient descent.
//!
//! The layer map is `Z ↦ relu(W Z + U X)`; the model state is the triple
//! `(W, U, a)` and predictions are `aᵀ Z*` where `Z*` is the unique fixed
//! point of the layer map whenever `‖W‖₂ < 1`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod condition;
pub mod data;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod kernel;
pub mod lab;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{DeqError, Result};
pub use linalg::{Matrix, Vector};
