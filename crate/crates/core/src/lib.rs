//! Numerical laboratory for the perfect conductivity problem with two
//! nearly touching convex inclusions.
//!
//! The crate solves the three auxiliary harmonic problems on a mesh that
//! resolves the thin gap, assembles the flux system that fixes the
//! inclusion potentials, evaluates the explicit asymptotic objects of the
//! energy and gradient expansions, and confronts the two in an
//! epsilon-sweep harness.

pub mod asymptotics;
pub mod config;
pub mod error;
pub mod field_solver;
pub mod fit;
pub mod functionals;
pub mod geometry;
pub mod harness;
pub mod mesh;
pub mod oracle;
pub mod quadrature;
pub mod reconstruction;
pub mod sparse;

pub use error::{Error, Result};
