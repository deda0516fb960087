//! Cross-subject fMRI-to-image decoding on a synthetic visual-system simulator.

pub mod bai;
pub mod config;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refinement;
pub mod representations;
pub mod rng;
pub mod subject_sim;

pub use error::{Error, Result};
