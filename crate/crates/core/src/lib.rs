//! Video crowd counting: density and segmentation ground truth from head
//! annotations, people-flow estimation, a motion-guided non-local
//! spatial-temporal counting network, its fused training objective, and a
//! deterministic synthetic crowd-video generator for desk-scale checks.

pub mod annotations;
pub mod cli;
pub mod error;
pub mod grid;
pub mod losses;
pub mod motion;
pub mod nn;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
