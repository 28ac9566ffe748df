pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod composer;
pub mod config;
pub mod error;
pub mod lm;
pub mod lmpo;
pub mod mas;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
