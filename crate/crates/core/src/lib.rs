//! Hard view pretraining at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f32 tensors, a reverse-mode tape and SGD with momentum.
//! - [`data`]: CIFAR-10 binary ingest, a procedural dataset and seeded batching.
//! - [`augment`]: view parameter sampling, rendering and pair geometry metrics.
//! - [`model`]: CNN encoder with projector and predictor heads, checkpoints.
//! - [`objectives`]: sample-wise SimSiam and SimCLR losses, pair loss matrices.
//! - [`selection`]: hardest-pair selection, ablation modes, n-step gate, IoU policy.
//! - [`trainer`]: the pretraining loop with logging, counters and resume.
//! - [`eval`]: weighted k-NN, linear probe and collapse diagnostics.
//! - [`analysis`]: selection-pattern statistics over JSONL logs.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! Both paths produce bit-identical results.

pub mod analysis;
pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use error::{HvpError, Result};
