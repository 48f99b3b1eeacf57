//! Fully convolutional residual networks at desk scale: dilated convolution,
//! stride-to-dilation network surgery, shift-and-stitch dense inference and
//! training, and online bootstrapping of hard pixels.

pub mod cli;
pub mod data;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod resolution;
pub mod tensor;

pub use error::{Error, Result};
