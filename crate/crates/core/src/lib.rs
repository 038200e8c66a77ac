//! Test-time adaptation for class-incremental learning at desk scale.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod optim;
pub mod proto;
pub mod protocol;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod tta;

pub use error::{Error, Result};
pub use tensor::Tensor;
