//! Multi-task fully convolutional segmentation of full-night single-channel
//! EEG.
//!
//! A raw signal of length `L` passes through a stack of convolution blocks
//! (each halving the time axis), an optional bidirectional LSTM stack, an
//! optional additive attention layer, and two 1×1 convolution heads. The
//! result is an arousal probability mask `[L/2^B, 1]` and a five-class sleep
//! stage mask `[L/2^B, 5]`.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape
//! - [`layers`]: convolution block, BiLSTM, attention, segmentation heads
//! - [`model`]: configuration, parameter construction, forward pass, checkpoints
//! - [`training`]: losses, Adam, augmentation and the early-stopped loop
//! - [`data`]: record files, preprocessing, label resampling, synthetic PSG
//! - [`metrics`]: mask resampling, confusion matrices, κ, AUROC, AUPRC
//! - [`cli`]: the `fullsleepnet` command-line front end

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
