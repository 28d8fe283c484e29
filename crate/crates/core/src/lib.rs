//! Bi-directional video anomaly detection by middle-frame prediction.
//!
//! A shared spatial encoder embeds every frame; a convolutional temporal
//! transformer encodes two context clips and decodes the target frames in
//! the forward and backward direction; a two-layer ConvLSTM bridge carries
//! low-level features to the decoder head; the two predictions are fused
//! and scored with a Gaussian-weighted SSIM + MAE objective.

pub mod bench;
pub mod bridge;
pub mod codec;
pub mod config;
pub mod convttrans;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
