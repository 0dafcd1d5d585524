pub mod arm;
pub mod autodiff;
pub mod bitstream;
pub mod codec;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod latent;
pub mod metrics;
pub mod occupancy;
pub mod ply;
pub mod quant;
pub mod range_coder;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
