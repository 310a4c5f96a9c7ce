//! Test-time adaptation for two-modality classifiers.
//!
//! The adaptation method filters each incoming batch twice before
//! minimizing entropy: once with a time-widened interquartile band over the
//! fused representations and once with a gate on multimodal and unimodal
//! prediction entropies. It adds a divergence term that pulls each unimodal
//! prediction toward the mixture of the other modality and the fused output.
//! Only the affine parameters of normalization layers are updated.

pub mod adapt;
pub mod datagen;
pub mod harness;
pub mod numkit;
pub mod model;
pub mod objective;
pub mod selection;
