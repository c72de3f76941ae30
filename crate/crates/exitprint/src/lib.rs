//! Files, timing, experiments and the command line for multi-exit model
//! fingerprinting.
//!
//! The algorithms live in [`exitprint_core`], re-exported as [`core`].

pub use exitprint_core as core;

pub mod config;
mod error;
pub mod experiment;
pub mod format;
pub mod timing;

pub use error::{Error, Result, StageExt};
