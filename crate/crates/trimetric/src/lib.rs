//! Mahalanobis metric learning from proximity-comparison triplets.
//!
//! Learns a trace-one positive semidefinite matrix by maximizing a soft
//! margin over triplet constraints. The solver alternates an exact
//! one-dimensional margin step with rank-one conditional-gradient updates
//! whose only expensive operation is a leading-eigenpair computation, so
//! feasibility never needs projection. A k-NN classifier, a retrieval
//! evaluator, brute-force verification oracles and a CLI round out the
//! toolkit.

pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod metric;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
