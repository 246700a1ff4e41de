pub mod autodiff;
pub mod backbone;
pub mod checks;
pub mod classifier;
pub mod error;
pub mod fft;
pub mod lgd;
pub mod nn;
pub mod ops;
pub mod seed;
pub mod sketch;
pub mod synth;
pub mod tensor;
pub mod train;

pub use backbone::{Network, NetworkKind, NetworkSpec};
pub use error::{Error, Result};
pub use lgd::{BlockVariant, DiffusionBlock};
pub use tensor::{DType, Tensor};
