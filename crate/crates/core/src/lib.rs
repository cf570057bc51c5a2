//! Layer-grouped sparse autoencoders for a small transformer.
//!
//! Activations are captured from the residual stream after each block,
//! adjacent layers are clustered by angular distance, and one JumpReLU SAE is
//! trained per cluster.

pub mod activation_store;
pub mod clustering;
pub mod desk_model;
pub mod downstream;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod sae;
pub mod scalar;

pub use desk_model::{DeskConfig, DeskParams};
pub use error::{Error, Result};
pub use numerics::{ExecMode, Matrix, RngStream};
pub use sae::{Activation, SaeParams};
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Sae32 = SaeParams<f32>;
pub type Sae64 = SaeParams<f64>;
pub type DeskParams32 = DeskParams<f32>;
pub type DeskParams64 = DeskParams<f64>;
