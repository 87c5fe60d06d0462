//! EEG-ConvTransformer: electrode-to-mesh projection, the region-attention
//! ConvTransformer network, its training harness and inter-head diversity
//! analysis.

pub mod data;
pub mod diversity;
pub mod error;
pub mod model;
pub mod montage;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
