pub mod cli;
pub mod data;
pub mod error;
pub mod msd;
pub mod network;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
