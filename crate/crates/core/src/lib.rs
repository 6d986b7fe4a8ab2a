pub mod config;
pub mod error;
pub mod gradient_design;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod quality_metrics;
pub mod rng;
pub mod tensor_model;
pub mod volume;

pub use error::{Error, Result};
pub use nn::{DenoiserModel, TrainConfig};
pub use pipeline::{StandardizationParams, TrainingPair};
pub use volume::{BrainMask, GradientScheme, Volume4D};
