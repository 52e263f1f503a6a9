//! Finite-volume eigensystem multiscale analysis for the lattice Anderson model.
//!
//! The crate covers lattice geometry and suitable covers, the exponent
//! schedule, Hölder-continuous disorder with reproducible sampling, dense
//! eigensolves of `H_Θ = -Δ + V_ω`, localization certificates, and Monte
//! Carlo drivers for the probabilistic estimates of the induction.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificates;
pub mod cli;
pub mod disorder;
pub mod error;
pub mod exponents;
pub mod lattice;
pub mod msa;
pub mod spectral;

pub use error::{Error, Result};

/// Formats a float for CSV output with full round-trip precision.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
