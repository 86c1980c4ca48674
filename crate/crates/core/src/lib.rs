//! Training-and-compression toolkit that learns hardware-friendly
//! k-out-of-n pruning masks jointly with network weights via Gumbel top-K
//! relaxation, optionally joint with weight quantization, and exports
//! structured-sparse models with bit-exact storage accounting.

pub mod config;
pub mod error;
pub mod granularity;
pub mod gumbel;
pub mod linalg;
pub mod mask;
pub mod metrics;
pub mod mnist;
pub mod model;
pub mod optim;
pub mod quant;
pub mod sparse;
pub mod tape;
pub mod state;
pub mod tensor;
pub mod train;

pub use error::{DppError, Result};
pub use tensor::{Scalar, Tensor};
