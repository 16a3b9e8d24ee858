//! Evidential mask segmentation at desk scale.
pub mod autodiff;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evidence;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod synth;
pub use error::{Error, Result};
