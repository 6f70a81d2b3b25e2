//! Differential calculus, Laplacians and Feynman–Kac semigroups on Poisson
//! configuration spaces, with Monte Carlo and deterministic verifiers.

pub mod battery;
pub mod error;
pub mod exterior;
pub mod forms;
pub mod geometry;
pub mod harness;
pub mod operators;
pub mod pointprocess;
pub mod quadrature;
pub mod scalar;
pub mod stochastic;

pub use error::{Error, Result};
