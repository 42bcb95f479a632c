//! A self-contained, desk-scale diffusion image-editing engine.
//!
//! The crate trains a tiny attention-based noise predictor on a procedural
//! sprite world, captures the DDIM inversion trace of a source image, learns
//! per-timestep Key/Value embeddings so the trace reconstructs the source,
//! and then re-samples with a new action prompt while content-preserving
//! self-attention keeps the object's texture and identity.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`gradcheck`]: dense math, reverse-mode gradients,
//!   finite-difference validation.
//! - [`scheduler`]: β/ᾱ tables, forward noising, DDIM step and its inverse.
//! - [`denoiser`]: the ε-prediction transformer with named self-attention
//!   sites and K/V interception hooks.
//! - [`pipeline`]: the three stages — invert, tune, edit.
//! - [`toyworld`]: sprite dataset, prompt vocabulary, training, metrics.
//! - [`persist`]: bit-exact checkpoint / ψ-file containers and PNG/PPM io.

pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod scheduler;
pub mod tape;
pub mod toyworld;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
