//! Diverse artistic stylization on a small denoising-diffusion backbone.
//!
//! The pieces fit together like this: a toy convolutional denoiser
//! ([`denoiser`]) is trained once on images and then frozen. A bank of
//! learnable style prompts ([`bank`]) is trained against the frozen denoiser;
//! at inference a prompt is drawn from the bank's per-entry mean/std with a
//! scale knob that trades stylization diversity against fidelity. A control
//! adapter ([`control`]) injects coarse content features back into the
//! denoiser so stylized outputs keep the content's layout. [`pipeline`] wires
//! those into stylization and style-sample generation, [`eval`] measures the
//! results, and [`dataset`]/[`checkpoint`] handle images and persistence.
//!
//! Everything is f64 on the CPU and deterministic for a fixed seed.

pub mod bank;
pub mod checkpoint;
pub mod control;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod grid;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthetic;
pub mod tape;
pub mod tensor;

//TMP pub use bank::{BankStats, BankTrainConfig, PromptBank};
//TMP pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
//TMP pub use control::{ContentEncoder, ControlAdapter};
//TMP pub use dataset::DatasetSpec;
//TMP pub use denoiser::{Denoiser, DenoiserConfig, DenoiserModel};
//TMP pub use error::{Error, Result};
//TMP pub use eval::{EvalReport, FeatureExtractor, GaussianStats};
//TMP pub use grid::LatentGrid;
//TMP pub use pipeline::{StylizeRequest, StylizeResult};
//TMP pub use schedule::NoiseSchedule;
//TMP pub use tensor::Tensor;
