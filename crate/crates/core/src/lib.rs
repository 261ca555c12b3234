pub mod error;
pub mod sbde;
pub mod gradcore;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcore::{grad_check, BatchStats, Tape, TensorId};
pub use tensor::{Dtype, Scalar, Tensor};
