//! Types shared across the fitting and prediction modules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training inputs (one row per point) paired with noisy outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub z: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, z: DVector<f64>) -> Result<Self> {
        if x.nrows() != z.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows but {} outputs",
                x.nrows(),
                z.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::DimensionMismatch("inputs have no columns".into()));
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("dataset contains non-finite values".into()));
        }
        Ok(Self { x, z })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    #[serde(alias = "lf")]
    Low,
    #[serde(alias = "hf")]
    High,
}

/// Whether predictive variances describe the latent function or a fresh
/// noisy observation of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Latent,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    pub covariance: Covariance,
}

impl PredictiveDistribution {
    pub fn variances(&self) -> DVector<f64> {
        match &self.covariance {
            Covariance::Full(c) => c.diagonal(),
            Covariance::Diagonal(v) => v.clone(),
        }
    }

    pub fn std_devs(&self) -> DVector<f64> {
        self.variances().map(f64::sqrt)
    }
}
