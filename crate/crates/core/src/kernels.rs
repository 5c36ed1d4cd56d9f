//! Gaussian (squared-exponential) correlation with one length scale per
//! input dimension.

use nalgebra::{DMatrix, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly positive length scales, one per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LengthScales(Vec<f64>);

impl LengthScales {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidConfig("length scales must not be empty".into()));
        }
        if let Some(bad) = theta.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "length scales must be positive and finite, got {bad}"
            )));
        }
        Ok(Self(theta))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for LengthScales {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LengthScales> for Vec<f64> {
    fn from(l: LengthScales) -> Self {
        l.0
    }
}

/// Kernel variance `sigma2`, length scales and the noise ratio
/// `eta = noise variance / sigma2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub theta: LengthScales,
    pub sigma2: f64,
    pub eta: f64,
}

impl KernelParams {
    pub fn new(theta: LengthScales, sigma2: f64, eta: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be non-negative, got {eta}")));
        }
        Ok(Self { theta, sigma2, eta })
    }

    pub fn noise_variance(&self) -> f64 {
        self.eta * self.sigma2
    }
}

fn check_dims(what: &str, got: usize, theta: &LengthScales) -> Result<()> {
    if got != theta.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{what} has dimension {got}, length scales have {}",
            theta.dim()
        )));
    }
    Ok(())
}

#[inline]
fn corr_unchecked(x: impl Iterator<Item = f64>, x2: impl Iterator<Item = f64>, theta: &[f64]) -> f64 {
    let s: f64 = x
        .zip(x2)
        .zip(theta)
        .map(|((a, b), t)| {
            let h = (a - b) / t;
            h * h
        })
        .sum();
    (-0.5 * s).exp()
}

pub fn gauss_corr(x: &[f64], x2: &[f64], theta: &LengthScales) -> Result<f64> {
    check_dims("x", x.len(), theta)?;
    check_dims("x2", x2.len(), theta)?;
    Ok(corr_unchecked(x.iter().copied(), x2.iter().copied(), theta.as_slice()))
}

/// Correlation between every row of `x` and every row of `x2`.
pub fn corr_matrix(x: &DMatrix<f64>, x2: &DMatrix<f64>, theta: &LengthScales) -> Result<DMatrix<f64>> {
    check_dims("x", x.ncols(), theta)?;
    check_dims("x2", x2.ncols(), theta)?;
    let t = theta.as_slice();
    Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        corr_unchecked(x.row(i).iter().copied(), x2.row(j).iter().copied(), t)
    }))
}

/// Symmetric correlation matrix of a design with itself; the diagonal is exactly one.
pub fn corr_matrix_sym(x: &DMatrix<f64>, theta: &LengthScales) -> Result<DMatrix<f64>> {
    check_dims("x", x.ncols(), theta)?;
    let n = x.nrows();
    let t = theta.as_slice();
    let mut r = DMatrix::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = corr_unchecked(x.row(i).iter().copied(), x.row(j).iter().copied(), t);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Derivative of `corr_matrix(x, x, theta)` with respect to `theta[d]`.
pub fn corr_matrix_grad(x: &DMatrix<f64>, theta: &LengthScales, d: usize) -> Result<DMatrix<f64>> {
    let r = corr_matrix_sym(x, theta)?;
    corr_matrix_grad_from(x, &r, theta, d)
}

/// Same as [`corr_matrix_grad`] but reuses an already computed correlation matrix.
pub fn corr_matrix_grad_from(
    x: &DMatrix<f64>,
    r: &DMatrix<f64>,
    theta: &LengthScales,
    d: usize,
) -> Result<DMatrix<f64>> {
    if d >= theta.dim() {
        return Err(Error::IndexOutOfRange {
            index: d,
            dim: theta.dim(),
        });
    }
    check_dims("x", x.ncols(), theta)?;
    let t3 = theta.as_slice()[d].powi(3);
    let col: DVectorView<f64> = x.column(d);
    let n = x.nrows();
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let h = col[i] - col[j];
            let v = r[(i, j)] * h * h / t3;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Per-dimension range (max - min) of the rows of `x`.
pub fn input_ranges(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols())
        .map(|d| {
            let c = x.column(d);
            c.max() - c.min()
        })
        .collect()
}
