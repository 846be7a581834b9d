//! Two-stream selective-scan pyramid network for figure skating assessment.
//!
//! The video stream localizes, classifies and scores technical elements
//! (TES) from visual features only. A parallel visual-audio stream fuses
//! audio context into the pyramid through cross attention and regresses the
//! program component score (PCS). Nothing computed in the visual-audio
//! stream flows back into the video stream.
//!
//! Crate layout:
//!
//! - [`tensor`]: sequence tensors, validity masks, layer kernels, a
//!   reverse-mode tape and a finite-difference gradient checker.
//! - [`mamba`]: masked bidirectional selective-scan blocks.
//! - [`backbone`]: temporal encoder, down-sampling pyramid, cross-attention
//!   fusion and the two-stream network.
//! - [`heads`], [`targets`], [`losses`]: prediction heads, point-label
//!   assignment and the multi-task objective.
//! - [`decode`], [`metrics`]: segment decoding, soft-NMS, element selection,
//!   Spearman correlation and mAP over tIoU thresholds.
//! - [`data`]: feature/label file formats, padding and the synthetic
//!   program generator.
//! - [`train`]: Adam, learning-rate schedule, checkpoints, training and
//!   evaluation drivers.

pub mod backbone;
pub mod layers;
pub mod data;
pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod heads;
pub mod losses;
pub mod mamba;
pub mod metrics;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
