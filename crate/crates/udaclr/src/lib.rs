//! Unsupervised domain-adaptive nested segmentation with category-level
//! regularization: global adversarial output alignment plus inter-domain
//! prototype alignment, a source-side prototype-guided discriminative loss,
//! and a target-side augmented-consistency loss with uncertainty filtering.
//!
//! Ships a synthetic domain-shift benchmark so the whole pipeline can be
//! trained and evaluated on a CPU in minutes.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod prototypes;
pub mod pseudo_uncertainty;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
