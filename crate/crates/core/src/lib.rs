//! Anisotropic long-range dependence of random fields on the square lattice.
//!
//! Lattice Green functions of nearest-neighbour autoregressions and their
//! near-unit-root limits, Type I / Type II spectral variance functionals,
//! stable characteristic functionals of aggregated fields, field simulation
//! and scaling-exponent estimation.

// Oracle constants keep every printed digit, and `!(x > 0.0)` guards are
// meant to reject NaN along with the out-of-range values.
#![allow(clippy::excessive_precision, clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod error;
pub mod fields;
pub mod green;
pub mod par;
pub mod quad;
pub mod spectra;
pub mod specfun;
pub mod stable_limits;

pub use error::{Error, Result};
pub use par::Exec;
