//! Inference-time fingerprinting for multi-exit neural networks.
//!
//! This crate holds the pure algorithmic pieces: a small differentiable
//! convolutional network, the shallow-deep transform that attaches internal
//! classifiers to a backbone, early-exit inference, exit-suppressing
//! fingerprint crafting, the early-exit-capacity verification metrics and the
//! model modifications used to stress-test verification.
//!
//! Everything here works on `alloc` only. File formats, wall-clock timing and
//! the experiment harness live in the `exitprint` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod arch;
pub mod attacks;
pub mod calibrate;
pub mod data;
mod error;
pub mod fingerprint;
pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;
mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{
    BackboneModel, ConfidenceVector, ExitPolicy, ExitTrace, InternalClassifier, MultiExitModel,
};
pub use real::Real;
pub use tensor::{Shape, Tensor};
