//! Representations under class imbalance: synthetic data, min-norm
//! max-margin and spectral self-supervised features, density-based
//! reweighting, sharpness-aware training and the evaluation around them.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod kde;
pub mod linalg;
pub mod maxmargin;
pub mod persist;
pub mod rng;
pub mod sam;
pub mod spectral;
pub mod theory;

pub use datagen::{Dataset, ToyConfig};
pub use error::{Error, Result};
pub use features::{FeatureKind, FeatureMap};
pub use kde::{KdeConfig, WeightVector};
pub use sam::{Mode, SamConfig};
