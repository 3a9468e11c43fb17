//! Instance discriminative learning (IDL) pre-training for speech-based
//! depression detection.
//!
//! The crate covers the whole pipeline: corpus ingestion and segmentation,
//! log-mel feature extraction, signal- and feature-level augmentation, a small
//! reverse-mode differentiation engine with the DepAudioNet backbone, the IDL
//! contrastive loss, batch sampling strategies (random, distinct-speaker and
//! pseudo-instance), downstream fine-tuning with ensembling, and a linear
//! speaker probe.

pub mod augment;
pub mod corpus;
pub mod dsp;
mod error;
pub mod loss;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};

/// Number of mel bins in every feature matrix.
pub const N_MELS: usize = 40;
/// Frames per training segment.
pub const SEGMENT_FRAMES: usize = 120;
/// Sample rate of every corpus handled here.
pub const SAMPLE_RATE_HZ: u32 = 16_000;
