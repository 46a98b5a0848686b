pub mod autograd;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod gradcheck;
pub mod optim;
pub mod data;
pub mod inflation;
pub mod metrics;
pub mod model;
pub mod training;
pub mod config;
pub mod cli;
