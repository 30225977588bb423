//! Multi-task keyword spotting and speaker verification network.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autodiff
//! engine, the four sub-networks (enhancement, acoustic, speaker, pooling),
//! the CTC loss with its brute-force oracle, optimizers, and scoring metrics.
//! File formats, audio front-end, and the training driver live in the `mtnet`
//! crate.
#![no_std]

extern crate alloc;

pub mod acoustic;
pub mod conv;
pub mod ctc;
pub mod enhance;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod real;
pub mod speaker;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Batch, ForwardOutput, ModelConfig, MultiTaskModel, Target, Variant};
pub use params::{Mode, ParamStore, Session};
pub use real::Real;
pub use tensor::Tensor;
pub use train::{OptimConfig, StepLosses, Trainer};
