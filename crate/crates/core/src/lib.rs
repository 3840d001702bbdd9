//! Batch SBEED on tabular entropy-regularized MDPs.
//!
//! The crate solves the SBEED minimax objective exactly over enumerated
//! function classes and checks the quantities its performance guarantee is
//! built from: temporal consistency, the telescoping identity, the
//! conditional-variance decomposition, the suboptimality bound, the
//! concentration statistics of the excess risk, and the explicit-constant
//! finite-sample bound.

pub mod classes;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mdp;
pub mod solvers;
pub mod theory;

pub use error::{Error, Result};
