pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csvlog;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grpo;
pub mod matting;
pub mod model;
pub mod optim;
pub mod params;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
