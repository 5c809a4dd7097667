//! Learned image compression built from spatial-shift blocks, channel
//! recursive attention and a mean-scale hyperprior, with an exact range
//! coder, a desk-scale training loop and complexity/BD-rate analysis.

pub mod analysis;
pub mod checkpoint;
pub mod cra;
pub mod entropy;
pub mod error;
pub mod image;
pub mod net;
pub mod nn;
pub mod shift;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
