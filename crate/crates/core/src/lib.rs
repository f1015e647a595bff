//! Manipulated-face detection built on multilevel facial semantic
//! segmentation and a cascade of local and semantic attention modules.

pub mod attention;
pub mod autograd;
pub mod branches;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod mfss;
pub mod nn;
pub mod seed;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
