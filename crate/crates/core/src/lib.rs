//! Black-box domain adaptation by domain division.
//!
//! Given hard-label query access to a frozen source classifier and unlabeled
//! target vectors, [`trainer::run_beta`] trains twin target networks through
//! warm-up distillation, loss-based easy/hard division, mutually-teaching
//! semi-supervised refinement and adversarial subdomain alignment.

pub mod autodiff;
pub mod blackbox;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod division;
pub mod error;
pub mod losses;
pub mod nn;
pub mod refine;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
