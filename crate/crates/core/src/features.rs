use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Supervised,
    SslSpectral,
    SslTrained,
    Identity,
    Random,
}

/// Linear feature extractor `z = W x`; rows of `weights` are feature
/// directions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub weights: Array2<f64>,
    pub kind: FeatureKind,
}

impl FeatureMap {
    pub fn new(weights: Array2<f64>, kind: FeatureKind) -> Result<Self> {
        if weights.nrows() == 0 {
            return Err(Error::Empty("feature map needs at least one row".into()));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("feature map has non-finite entries".into()));
        }
        Ok(FeatureMap { weights, kind })
    }

    pub fn identity(d: usize) -> Self {
        FeatureMap {
            weights: Array2::eye(d),
            kind: FeatureKind::Identity,
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Features of every row of `inputs`, as an `n x m` matrix.
    pub fn apply(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} columns, feature map expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(inputs.dot(&self.weights.t()))
    }
}
