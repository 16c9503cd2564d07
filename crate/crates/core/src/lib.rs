//! Desk-scale latent video diffusion with in-context task conditioning.
//!
//! The crate is organized around a from-scratch tensor engine with
//! reverse-mode autodiff ([`tensor`]), on top of which sit:
//!
//! - [`rope`] — 3-D rotary position encoding with exact relative-offset
//!   oracles,
//! - [`vae`] — a causal spatial-temporal variational autoencoder,
//! - [`dit`] — a joint diffusion transformer over condition and target
//!   token sequences,
//! - [`flow`] — flow-matching training and Euler sampling,
//! - [`task`] — a synthetic in-context vision-task suite with metrics,
//! - [`io`], [`config`], [`commands`] — file formats, run configuration,
//!   and the command entry points used by the CLI.

pub mod commands;
pub mod config;
pub mod dit;
pub mod error;
pub mod flow;
pub mod io;
pub mod parallel;
pub mod rng;
pub mod rope;
pub mod scalar;
pub mod task;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use rng::{RngPool, RngStream};
pub use scalar::{DType, Scalar};
pub use tensor::gradcheck::{grad_check, GradCheckReport};
pub use tensor::optim::{AdamW, OptimConfig};
pub use tensor::tape::{Grads, Tape};
pub use tensor::Tensor;
