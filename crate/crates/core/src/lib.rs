//! Toy-scale body-mesh-recovery inference pipeline with batched encoding,
//! gated decoding, static execution plans and a feedforward topology
//! projector.

pub mod bodymodel;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod numkit;
pub mod pipeline;
pub mod priors;
pub mod projection;

pub use error::{Error, Result};
