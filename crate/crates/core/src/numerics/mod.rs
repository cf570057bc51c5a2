//! Dense kernels, the Adam optimizer, seeded random streams and a central
//! difference gradient oracle.

mod adam;
mod finite_diff;
mod matrix;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use finite_diff::finite_diff_grad;
pub use matrix::{axpy, dot, ExecMode, Matrix};
pub use rng::{RngStream, RNG_ALGORITHM};
