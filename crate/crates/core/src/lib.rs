//! Gaussian-state simulation of an optical parametric oscillator, its output
//! light, a filter cavity and an atomic magnetometer, with homodyne
//! conditioning and closed-form reference results.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collective;
pub mod error;
pub mod filter;
pub mod magnetometry;
pub mod numerics;
pub mod opo;
pub mod par;
pub mod riccati;
pub mod state;
pub mod table;

pub use error::{Error, Result};
pub use par::Execution;
pub use riccati::{CovTrajectory, RiccatiSystem};
pub use state::{GaussianState, HomodyneOutcome, StepMatrix, VariableLabel};
pub use table::Table;
