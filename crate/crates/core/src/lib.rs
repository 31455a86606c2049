pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod disc;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{no_grad, Element, Tensor, TensorError, TensorResult};
