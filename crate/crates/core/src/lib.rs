//! Age regression from volumetric images, treating a volume as a sequence of
//! 2D slices: a shared 2D convolutional backbone feeds a bidirectional LSTM
//! over pooled slice features, with a 3D convolutional baseline alongside.
//! Includes the reverse-mode autodiff core, training loop, evaluation
//! metrics, and a synthetic phantom data pipeline.

pub mod data;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod runtime;
pub mod tensor;

pub use tensor::{Graph, ReduceKind, Scalar, Tensor, TensorError, TensorResult, Var};
