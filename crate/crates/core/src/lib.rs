pub mod attention;
pub mod dade;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rf;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor};
