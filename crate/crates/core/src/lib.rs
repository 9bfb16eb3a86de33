pub mod autograd;
pub mod error;
pub mod exec;
pub mod mask;
pub mod nn;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
