//! Predictivity coefficient and interval-calibration metrics on a test set
//! with known ground truth.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley correction step.
pub fn gauss_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::DomainViolation(format!("probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    let e = gauss_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x -= u / (1.0 + 0.5 * x * u);
    Ok(x)
}

/// `1 - SSE / SST`, with SST taken about the mean of `y_true`.
pub fn q2(y_true: &[f64], mean_pred: &[f64]) -> Result<f64> {
    if y_true.len() != mean_pred.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} truths, {} predictions",
            y_true.len(),
            mean_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::InvalidConfig("Q2 needs at least two test points".into()));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let sst: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::ConstantTruth);
    }
    let sse: f64 = y_true.iter().zip(mean_pred).map(|(y, m)| (y - m).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// 99 equispaced levels `0.01, 0.02, ..., 0.99`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub alpha_grid: Vec<f64>,
    pub cicp: Vec<f64>,
    pub picp: Vec<f64>,
    pub ciw: Vec<f64>,
    pub piw: Vec<f64>,
    pub iae_ci: f64,
    pub iae_pi: f64,
    pub q2: f64,
}

impl CalibrationReport {
    /// Index of `alpha` in the grid (exact match up to 1e-12).
    pub fn level_index(&self, alpha: f64) -> Option<usize> {
        self.alpha_grid.iter().position(|a| (a - alpha).abs() < 1e-12)
    }
}

/// Trapezoid rule for `|coverage - alpha|` over the grid span.
fn integral_abs_error(grid: &[f64], coverage: &[f64]) -> f64 {
    grid.windows(2)
        .zip(coverage.windows(2))
        .map(|(a, c)| 0.5 * (a[1] - a[0]) * ((c[0] - a[0]).abs() + (c[1] - a[1]).abs()))
        .sum()
}

fn coverage_fraction(truth: &[f64], mean: &[f64], half_width: impl Fn(usize) -> f64) -> f64 {
    let hits = truth
        .iter()
        .zip(mean)
        .enumerate()
        .filter(|(i, (y, m))| (*y - *m).abs() <= half_width(*i))
        .count();
    hits as f64 / truth.len() as f64
}

/// Coverage probabilities and mean widths of confidence intervals (latent
/// truth) and prediction intervals (noisy draws) over `alpha_grid`.
pub fn coverage_report(
    y_true: &[f64],
    z_noisy: &[f64],
    mean_pred: &[f64],
    latent_sd: &[f64],
    noise_variance_hat: f64,
    alpha_grid: &[f64],
) -> Result<CalibrationReport> {
    if alpha_grid.is_empty()
        || alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0))
        || alpha_grid.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::EmptyGrid);
    }
    let n = y_true.len();
    if z_noisy.len() != n || mean_pred.len() != n || latent_sd.len() != n {
        return Err(Error::DimensionMismatch("coverage inputs differ in length".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    if latent_sd.iter().any(|s| !(*s >= 0.0)) || !(noise_variance_hat >= 0.0) {
        return Err(Error::InvalidConfig("standard deviations must be non-negative".into()));
    }
    let pred_sd: Vec<f64> = latent_sd.iter().map(|s| (s * s + noise_variance_hat).sqrt()).collect();
    let mean_latent_sd = latent_sd.iter().sum::<f64>() / n as f64;
    let mean_pred_sd = pred_sd.iter().sum::<f64>() / n as f64;

    let k = alpha_grid.len();
    let (mut cicp, mut picp, mut ciw, mut piw) = (
        Vec::with_capacity(k),
        Vec::with_capacity(k),
        Vec::with_capacity(k),
        Vec::with_capacity(k),
    );
    for &alpha in alpha_grid {
        let phi = gauss_quantile(0.5 * (1.0 + alpha))?;
        cicp.push(coverage_fraction(y_true, mean_pred, |i| phi * latent_sd[i]));
        picp.push(coverage_fraction(z_noisy, mean_pred, |i| phi * pred_sd[i]));
        ciw.push(2.0 * phi * mean_latent_sd);
        piw.push(2.0 * phi * mean_pred_sd);
    }
    Ok(CalibrationReport {
        iae_ci: integral_abs_error(alpha_grid, &cicp),
        iae_pi: integral_abs_error(alpha_grid, &picp),
        q2: q2(y_true, mean_pred).unwrap_or(f64::NAN),
        alpha_grid: alpha_grid.to_vec(),
        cicp,
        picp,
        ciw,
        piw,
    })
}
