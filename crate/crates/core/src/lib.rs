//! Global-local transformer for patch-based scalar regression on images.
//!
//! Two convolutional pathways see the whole image and a local patch; the
//! local features attend to the global ones through an asymmetric
//! cross-attention, and per-patch predictions are aggregated, scored and
//! turned into heatmaps. Everything numeric is generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below pin the common choices.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checks;
pub mod data;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patch;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{GltError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
