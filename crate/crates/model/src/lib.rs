pub mod chat;
pub mod checkpoint;
pub mod clip;
pub mod data;
pub mod eval;
pub mod loss;
pub mod memory;
pub mod model;
pub mod prompt;
pub mod train;

pub use pixelrt_core::{Error, Result};
