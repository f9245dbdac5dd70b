pub mod attention;
pub mod bench;
mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod labels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod semantic_map;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
