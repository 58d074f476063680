//! Desk-scale laboratory for preference optimization on exactly enumerable
//! tabular language policies.
//!
//! The pipeline mirrors a production preference-alignment stack at a size
//! where everything is checkable: a grid of graded policies synthesizes
//! chosen/rejected instruction data, a judge filters a model's own samples
//! against a mean-score threshold, four preference losses with analytic
//! gradients drive mini-batch iterative training with reference switching,
//! and a brute-force enumeration oracle verifies probabilities, gradients
//! and alignment trends exactly.

pub mod analytics;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod judge;
pub mod losses;
pub mod matrix;
pub mod parallel;
pub mod rng;
pub mod seq;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
