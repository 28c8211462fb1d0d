//! CenterSeg: a center-guided prototype classifier for semantic
//! segmentation, built on an in-crate reverse-mode autodiff engine and
//! exercised end to end on a synthetic multimode dataset.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod interpret;
pub mod losses;
pub mod metrics;
pub mod prototype;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
