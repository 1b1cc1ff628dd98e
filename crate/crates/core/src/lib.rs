//! Pulse-level open-quantum-system simulator for a transmon qutrit coupled to
//! a magnon (Kittel) mode, with Wigner tomography and density-matrix
//! reconstruction of the prepared magnon states.
//!
//! Module map:
//!
//! - [`operators`]: dense operator algebra (Fock, qutrit, displacement, parity).
//! - [`model`]: physical parameters, Autler-Townes dressed states, Hamiltonians.
//! - [`schedule`]: multi-channel pulse programs and pulse calibration.
//! - [`lindblad`]: master-equation propagation of schedules.
//! - [`experiments`]: spectroscopy maps, Chevron scans, state preparation.
//! - [`tomography`]: swap-curve regression, Wigner maps, reconstruction.
//! - [`cli`]: configuration and subcommand dispatch (feature `cli`).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod lindblad;
pub mod model;
pub(crate) mod numeric;
pub mod operators;
pub(crate) mod par;
pub mod schedule;
pub mod selftest;
pub mod tomography;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
pub use lindblad::DensityMatrix;
pub use model::PhysicalParams;
pub use operators::{ComplexMatrix, HilbertLayout, C64};

/// Version string stamped into every output file.
pub const ARTIFACT_VERSION: &str = concat!("magnon-sim ", env!("CARGO_PKG_VERSION"));
