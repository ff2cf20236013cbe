//! Disentangle cross-lingual sentence embeddings into semantic and language
//! parts, train the extraction networks, and evaluate the result.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod project;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossConfig, Pairing, Preset, Term};
pub use model::{DisentangledBatch, ModelParams};
pub use numerics::Matrix;
