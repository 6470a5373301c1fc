//! Barrier-smoothing solver for bilevel programs with inequality-constrained
//! lower levels.
//!
//! The lower-level KKT system is replaced by a smooth perturbed system in
//! `(y, s)`; the upper level is then driven by an augmented Lagrangian over
//! the approximate solution map, using the implicit-function sensitivity of
//! the smoothed system as a surrogate for `∇y(x)`.

pub mod error;
pub mod numkit;
pub mod problem;
pub mod smoothing;
pub mod inner;
pub mod ebsa;
pub mod metrics;
pub mod protocol;

pub use error::{Error, Result};
pub use numkit::{DenseMatrix, LuFactor};
pub use problem::{corpus_get, corpus_names, BilevelModel, BilevelProblem, Dims};
