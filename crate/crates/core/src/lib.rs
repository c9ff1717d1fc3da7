//! Adversarial regularization for two-input classifiers.
//!
//! A question-only adversary is attached to the shared question encoder
//! through a gradient reversal layer, and its reversed gradients push the
//! encoder away from answer-predictive (biased) features. The crate
//! contains everything needed to study the method on synthetic data whose
//! answer priors change between train and test:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation with a gradient
//!   reversal op
//! * [`model`]: the modular classifier and the adversary head
//! * [`objective`]: soft-target cross entropy and the 10-annotator score
//! * [`schedule`]: delayed / warmed-up reversal coefficient
//! * [`dataset`]: changing-priors data generation
//! * [`trainer`]: two-optimizer co-training with telemetry and early stopping
//! * [`analysis`]: per-type scores, blind oracles, sweeps and correlation

pub mod analysis;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod model;
pub mod objective;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
