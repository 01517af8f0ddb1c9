//! Analysis of second-order hyperbolic symbols that vanish to second order
//! on a manifold of double characteristics.
//!
//! The crate classifies the spectral structure of the Hamilton map at double
//! points (effective / type 1 / type 2), computes the scalar invariant
//! `theta` whose sign encodes the trichotomy, verifies normal-form bracket
//! conditions, measures tangency of bicharacteristics against the double
//! manifold by Hamilton-flow integration, and checks elementary
//! factorizations `p = -Lambda M + Q` by supremum sampling.
//!
//! Entry points:
//! - [`expr`]: exact symbolic expressions, Poisson brackets, Hamilton fields;
//! - [`spectral`]: Hamilton map spectra, bracket tables, `theta`, labels;
//! - [`normform`]: normal-form certificates and the pointwise reduction;
//! - [`flow`]: flow integration, transition invariants, tangency search;
//! - [`factor`]: elementary factorization construction and checks;
//! - [`cli`]: symbol files, built-in symbols, reports.
//!
//! The `examples/` directory shows one runnable program per capability.

pub mod error;
pub mod expr;
pub mod linalg;
pub mod rng;
pub mod builtins;
pub mod flow;
pub mod normform;
pub mod spectral;

pub use error::{Error, Result};
pub use expr::{hamilton_field, parse, poisson, Expr, PhasePoint, Var};
