//! Joint speaking-and-talking-face generation.

pub mod data_model;
pub mod data_pipeline;
pub mod encoders;
pub mod audio_synth;
pub mod entanglement;
pub mod video_synth;
pub mod model;
pub mod training;
pub mod evaluation;
pub mod ablation;
mod error;

pub use error::{Error, Result};
