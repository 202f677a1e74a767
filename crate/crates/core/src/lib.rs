pub mod adversarial;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod quantizer;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
