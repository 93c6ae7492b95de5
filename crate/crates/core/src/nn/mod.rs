//! Counting network with hand-derived backward passes.

pub mod attention;
pub mod config;
pub mod layers;
pub mod model;
pub mod nonlocal;
pub mod params;

pub use attention::{ResidualAttention, SegHead};
pub use config::{AblationMode, ModelConfig, NonLocalOrder};
pub use layers::Tensor;
pub use model::{GuidanceMap, Model, ModelInput, ModelOutput};
pub use nonlocal::{NonLocal, NonLocalMode};
pub use params::{Checkpoint, ModelParams};
