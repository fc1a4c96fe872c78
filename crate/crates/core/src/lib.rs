//! Overfitting with conditional diffusion: a hypernetwork that generates,
//! for each input sample, the weight update a single layer of a base model
//! would receive if that model were finetuned on the sample.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: tensors, MLP forward/backward, losses, Adam, seeded RNG and
//!   the checkpoint directory format.
//! - [`datasets`]: synthetic blobs and tabular regression, CSV and IDX loaders,
//!   splitting and standardisation.
//! - [`layer_select`]: loss-entropy layer selection with a Gaussian KDE.
//! - [`overfit`]: per-sample finetuning and the training corpus of deltas.
//! - [`hyperdiff`]: noise schedule, condition encoders, the U-Net denoiser,
//!   training and ancestral sampling.
//! - [`scale`]: the log-scale magnitude estimator.
//! - [`harness`]: configuration, the staged pipeline, evaluation variants and
//!   reports.

pub mod datasets;
pub mod error;
pub mod harness;
pub mod hyperdiff;
pub mod layer_select;
pub mod numkit;
pub mod overfit;
pub mod scale;

pub use error::{Error, Result};
