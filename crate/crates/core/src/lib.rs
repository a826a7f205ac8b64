//! Dynamic skip connections for U-like segmentation networks.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases below fix the two concrete precisions.

pub mod autodiff;
pub mod data;
pub mod dmsk;
mod error;
pub mod nn;
pub mod params;
mod scalar;
pub mod tensor;
pub mod train;
pub mod ttt;
pub mod unet;
pub mod verify;

pub use autodiff::{Grads, Mode, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
