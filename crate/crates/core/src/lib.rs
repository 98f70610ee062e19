//! Explainable image classification at desk scale.
//!
//! A compact CNN trained with a small reverse-mode autodiff engine, a
//! deterministic stratified splitter, multi-class metrics, and
//! HiResCAM / Grad-CAM attribution with feature-map visualization.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod explain;
pub mod imaging;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, TensorId};
