pub mod cli;
pub mod config;
pub mod convert;
pub mod entropy;
pub mod error;
pub mod model_file;
pub mod network;
pub mod neuron;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
