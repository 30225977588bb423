//! Audio front-end, synthetic corpus, file formats, and the training and
//! evaluation drivers for the multi-task keyword spotting / speaker
//! verification network in `mtnet-core`.

pub mod audio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use error::{Error, Result};
