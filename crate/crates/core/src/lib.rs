pub mod classifier;
pub mod config;
pub mod ddpm_trainer;
pub mod demo;
pub mod denoiser;
pub mod error;
pub mod feature_analysis;
pub mod imageio;
pub mod ingestion;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
