pub mod data;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod group;
pub mod layers;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{NptnError, Result};
pub use rng::Rng;
pub use tensor::{NDTensor, Scalar, Tensor};
