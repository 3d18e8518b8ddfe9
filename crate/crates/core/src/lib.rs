pub mod config;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod patch;
pub mod positional;
pub mod probe;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Rng, Tensor, Var};
