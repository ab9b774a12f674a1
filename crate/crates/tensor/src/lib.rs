//! Small dense tensor library with reverse-mode autodiff, generic over
//! `f32` and `f64`.

pub mod error;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod var;

pub use error::{Result, TensorError};
pub use layers::{instance_norm, Conv2d, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use var::{Grads, Var};
