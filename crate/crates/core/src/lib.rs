pub mod base_model;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod localization;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refinement;
pub mod retarget;
pub mod train;
pub mod video;

pub use config::{ModelConfig, ModuleSet};
pub use error::{Error, Result};
