//! Desk-scale toolkit for channel-adaptive self-supervised learning on
//! multi-lead ECG signals.
//!
//! The crate covers the full experimental pipeline:
//!
//! * [`signal_io`] — ECGW binary signal files, JSON dataset manifests, lead
//!   identities, subject-stratified splits, and a synthetic generator.
//! * [`preprocess`] — resampling, mean removal, moving average, Butterworth
//!   band-pass, and fixed-length windowing.
//! * [`augment`] — the five base augmentations plus random lead masking
//!   (RLM) and random lead selection (RLS), and positive-pair construction.
//! * [`tensor`] — a reverse-mode autodiff graph over `ndarray` arrays,
//!   generic over the scalar type.
//! * [`model`] — the channel-adaptive encoder (channel-independent temporal
//!   convolutions, dimension-adaptive pooling, convolutional positional
//!   encoding, transformer blocks) with projection/classification heads,
//!   zero-padding baseline path, parameter accounting, and checkpoints.
//! * [`ssl_pretrain`] — SimCLR-style contrastive pretraining with the
//!   NT-Xent loss, Adam, exponential learning-rate decay, early stopping.
//! * [`finetune`] — supervised adaptation with class-balanced hierarchical
//!   sampling and binary cross-entropy.
//! * [`metrics`] — the CinC challenge score with pluggable weight matrix.
//! * [`profiler`] — peak-memory and epoch-time measurement contrasting the
//!   zero-padding and adaptive-pooling input modes.
//! * [`fixtures`] — golden-fixture verification.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); the aliases below fix the concrete types used by the
//! shipped binaries.

pub mod augment;
pub mod error;
pub mod finetune;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod profiler;
pub mod signal_io;
pub mod ssl_pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{CoreError, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

/// Scalar type used by training runs and checkpoints.
pub type TrainScalar = f32;
/// Scalar type used by finite-difference gradient verification.
pub type CheckScalar = f64;

/// Autodiff tensor at training precision.
pub type TrainTensor = tensor::Tensor<TrainScalar>;
/// Named parameter set at training precision.
pub type TrainParams = model::ParameterStore<TrainScalar>;
