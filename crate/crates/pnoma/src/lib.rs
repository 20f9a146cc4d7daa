//! Multi-user image transmission over a shared noisy channel.
//!
//! This crate trains a single convolutional autoencoder that serves `n`
//! users simultaneously: each user's latent image code is mapped through a
//! user-specific complex projection onto a shared multiple-access channel,
//! and recovered by the matching back-projection before decoding. Doubling
//! the number of users composes the existing projections with the two halves
//! of a fresh Haar-random unitary, which keeps the new user groups exactly
//! orthogonal at handoff — the starting point for progressive fine-tuning.
//!
//! Modules follow the data path: [`numcore`] (tensors, autodiff, RNG) →
//! [`channel`] (noise, gains, power control) → [`projection`] (codebooks) →
//! [`model`] (encoder/decoder) → [`data`] (datasets and index tuples) →
//! [`training`] (optimizer, fine-tuning, checkpoints) → [`analysis`]
//! (metrics and reports) → [`runner`] (file-producing entry points used by
//! the CLI).

#![forbid(unsafe_code)]

pub mod channel;
pub mod error;
pub mod numcore;
pub mod projection;

pub use error::{Error, ErrorClass, Result};
