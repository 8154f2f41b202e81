//! Product attribute classification and hybrid recommendation trained from
//! scratch on a small set of hand-differentiated tensor operations.

pub mod attr;
pub mod data;
pub mod error;
pub mod metrics;
pub mod multitask;
pub mod ops;
pub mod params;
pub mod recsys;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParameterStore;
pub use rng::RngState;
pub use tensor::Tensor;
