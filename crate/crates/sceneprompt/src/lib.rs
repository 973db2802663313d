//! Scene-aware probabilistic prompt learning on synthetic scenes.
//!
//! The crate implements learnable instance-conditioned prompt banks,
//! multi-Gaussian prompt modeling with reparameterized sampling,
//! RoI-level contrastive alignment, geometric pseudo-label losses, and
//! latent-space structure analytics, all over a small reverse-mode
//! autodiff core verified by a finite-difference oracle.

pub mod apb;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod latentmetrics;
pub mod mgpm;
pub mod numerics;
pub mod objective;
pub mod pseudo3d;
pub mod scenegen;

pub use error::{Error, Result};
