//! Counterfactual-infused knowledge distillation, end to end, at desk scale.
//!
//! The crate trains small two-class MLPs on synthetic 2-D data, generates
//! counterfactual explanations (minimal input perturbations that flip a
//! teacher's prediction), distills a student on originals plus their
//! counterfactuals, and checks two properties numerically:
//!
//! - [`fisher`]: in a logistic-regression model, boundary-resident samples
//!   carry more Fisher information, which lowers the MLE's squared error.
//! - [`geometry`]: a student that matches the teacher on input/counterfactual
//!   pairs has a decision boundary within `alpha + epsilon` Hausdorff distance
//!   of the teacher's.
//!
//! The [`experiments`] module wires these into reproducible, seeded runs that
//! the `cod` command-line tool exposes.

pub mod cfe;
pub mod data;
pub mod distill;
mod error;
pub mod experiments;
pub mod fisher;
pub mod geometry;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
