//! Multi-view self-supervised representation learning: sliced Wasserstein
//! distribution alignment across views, complementarity-aware contrastive
//! learning, the alternating critic/encoder trainer and probe evaluation.

pub mod autodiff;
pub mod cli;
pub mod discrepancy;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod loco;
pub mod probe;
pub mod rng;
pub mod suite;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
