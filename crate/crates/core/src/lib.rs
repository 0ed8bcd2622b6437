//! A desk-scale VisualRWKV: linear-RNN time mixing with data-independent and
//! data-dependent recurrence, 2D image scanning over the visual token span,
//! multimodal prompt assembly, and a runtime that executes the same weights
//! either over a whole sequence (training) or one token at a time with a
//! constant-size recurrent state (inference).
//!
//! Module map:
//! - [`kernels`]: token shift, lora/ddlerp, decay transform, WKV operators and
//!   their analytic backward passes.
//! - [`blocks`]: time-mixing, channel-mixing and residual block composition.
//! - [`vision`]: patch embedding, projector, scan permutations and schedules.
//! - [`prompting`]: byte vocabulary and prompt layouts.
//! - [`model`]: configuration, parameters, parallel/recurrent execution,
//!   losses, optimizer, freeze masks, tiny attention and checkpoints.
//! - [`autograd`]: the tensor tape used for training.

pub mod autograd;
pub mod blocks;
mod error;
pub mod kernels;
pub mod model;
pub mod params;
pub mod prompting;
mod real;
pub mod vision;

pub use error::{Error, Result};
pub use real::Real;
