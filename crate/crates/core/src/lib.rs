//! Prediction-augmented estimation for randomized trials.
//!
//! Outcome predictions from a language model (or any other black-box
//! predictor) are folded into cross-fitted AIPW influence functions through
//! a calibration weight that is learned from the trial itself. The weight
//! shrinks to zero wherever the predictions carry no information, so the
//! estimators stay unbiased under arbitrary prediction error.

pub mod calibration;
pub mod data;
pub mod efftest;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod nuisance;
pub mod par;
pub mod predictor;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{CalmError, Result};
