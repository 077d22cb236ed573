//! Unsupervised identification of spiral particle-track events.
//!
//! The crate covers the whole chain from synthetic detector events to
//! clustering scores:
//!
//! * [`simkit`] integrates charged particles through a solenoid field with
//!   energy loss and injects detector-style noise.
//! * [`pipeline`] projects point clouds onto the pad plane, rasterizes them
//!   into log-scaled charge images and optionally cleans them.
//! * [`latent`] builds or loads feature vectors and clusters them with a
//!   multi-restart k-means protocol.
//! * [`neuralcore`] and [`mixae`] implement the mixture-of-autoencoders
//!   clustering model with hand-written reverse-mode gradients.
//! * [`metrics`] scores clusterings against ground truth (Hungarian-matched
//!   accuracy, adjusted Rand index, purity).
//! * [`harness`] orchestrates reproducible experiments from a manifest.

pub mod error;
pub mod formats;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod mixae;
pub mod neuralcore;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod simkit;

pub use error::{Error, Result};
