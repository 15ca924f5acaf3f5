//! Tuning a small GAN toward simulated positive-interaction rates.
//!
//! The pipeline pretrains a generator/discriminator pair on a procedural
//! two-class corpus, labels generator samples with noisy interaction rates
//! drawn from closed-form objectives, fits a frozen surrogate estimator to
//! those labels, and then tunes the generator against the surrogate. The
//! [`stats`] module compares pre- and post-tuning samples.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod estimator;
pub mod gan;
pub mod nets;
pub mod objectives;
pub mod seeds;
pub mod stats;
pub mod tuning;

pub use error::{CoreError, Result};
