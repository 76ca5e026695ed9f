//! Two-stream fine-grained image classifier whose local stream feeds one
//! patch feature through a stacked LSTM for several steps and pools the
//! per-step states with learned soft attention.

pub mod ablation;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod patches;
pub mod refiner;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::Parameters;
pub use tensor::{Rng, Tensor};
