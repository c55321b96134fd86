pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod heads;
pub mod image;
pub mod labels;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scores;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
