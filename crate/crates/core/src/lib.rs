//! Differentially private adaptive optimizers.
//!
//! Building blocks for studying how Gaussian noise (independent or
//! correlated across rounds) interacts with second-moment estimates in
//! Adam and AdaGrad: clipping and batch aggregation, noise streams,
//! optimizer step functions for the private variants, closed-form bias
//! and variance analysis, synthetic problems, and a seeded multi-trial
//! experiment harness.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod noise;
pub mod optim;
pub mod problems;
pub mod seed;
pub mod vector;

pub use error::{Error, Result};
pub use vector::{GradBatch, PrivacyParams, Vector};
