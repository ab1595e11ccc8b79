//! Flow-image super-resolution with quaternion spatial modeling and dynamic
//! flow convolution, on top of a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fld;
pub mod flow_conv;
pub mod gradcheck;
mod linalg;
pub mod metrics;
pub mod net;
pub mod quaternion;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
