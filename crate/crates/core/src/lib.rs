//! Split execution of convolutional networks across a trusted and an
//! untrusted context.
//!
//! Activations are factored into a low-rank part kept in the trusted context
//! and a residual processed by the untrusted one; convolution outputs of the
//! two parts sum to the dense result exactly.

pub mod asymconv;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod planner;
pub mod privacy;
pub mod spectral;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Matrix, Tensor};
