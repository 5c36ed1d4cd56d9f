//! Single-fidelity noisy GP regression with a linear-predictor prior mean,
//! profiled maximum-likelihood fitting and kriging predictions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Covariance, CovarianceKind, Dataset, PredictMode, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::kernels::{corr_matrix, corr_matrix_grad_from, corr_matrix_sym, input_ranges, KernelParams, LengthScales};
use crate::numerics::{chol_factor, JitterPolicy, SpdFactorization};
use crate::optimize::{multi_start_minimize_with, BoxBounds, MultiStartConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const RANK_TOLERANCE: f64 = 1e-10;
const SIGMA2_FLOOR: f64 = 1e-300;

/// One regression feature `f_j(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFunction {
    Constant,
    /// The value of one input coordinate.
    Coordinate(usize),
}

/// Ordered regression basis; the prior mean is `f(x)ᵀ β`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub functions: Vec<BasisFunction>,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self::constant()
    }
}

impl BasisSpec {
    pub fn constant() -> Self {
        Self {
            functions: vec![BasisFunction::Constant],
        }
    }

    /// Constant plus every input coordinate.
    pub fn linear(dim: usize) -> Self {
        let mut functions = vec![BasisFunction::Constant];
        functions.extend((0..dim).map(BasisFunction::Coordinate));
        Self { functions }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn design_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        for f in &self.functions {
            if let BasisFunction::Coordinate(d) = f {
                if *d >= x.ncols() {
                    return Err(Error::IndexOutOfRange {
                        index: *d,
                        dim: x.ncols(),
                    });
                }
            }
        }
        Ok(DMatrix::from_fn(x.nrows(), self.len(), |i, j| {
            match self.functions[j] {
                BasisFunction::Constant => 1.0,
                BasisFunction::Coordinate(d) => x[(i, d)],
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub beta: DVector<f64>,
    pub kernel: KernelParams,
}

/// Either a search interval for the noise ratio or a pinned value
/// (`Fixed(0.0)` reproduces noise-free interpolation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaBounds {
    Range { lower: f64, upper: f64 },
    Fixed(f64),
}

/// Search box for `(theta, eta)` in their natural (positive) scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub theta_lower: Vec<f64>,
    pub theta_upper: Vec<f64>,
    pub eta: EtaBounds,
}

pub const DEFAULT_ETA_LOWER: f64 = 1e-8;
pub const DEFAULT_ETA_UPPER: f64 = 1e2;

impl HyperBounds {
    /// `theta_d` in `[1e-3, 1e3]` times the range of input dimension `d`;
    /// `eta` in `[1e-8, 1e2]`.
    pub fn default_for(x: &DMatrix<f64>) -> Self {
        let ranges: Vec<f64> = input_ranges(x)
            .into_iter()
            .map(|r| if r > 0.0 && r.is_finite() { r } else { 1.0 })
            .collect();
        Self {
            theta_lower: ranges.iter().map(|r| 1e-3 * r).collect(),
            theta_upper: ranges.iter().map(|r| 1e3 * r).collect(),
            eta: EtaBounds::Range {
                lower: DEFAULT_ETA_LOWER,
                upper: DEFAULT_ETA_UPPER,
            },
        }
    }

    pub fn with_eta(mut self, eta: EtaBounds) -> Self {
        self.eta = eta;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta_lower.len()
    }

    /// Optimization box in log coordinates; `eta` is included unless pinned.
    pub fn log_box(&self) -> Result<BoxBounds> {
        if self.theta_lower.len() != self.theta_upper.len() {
            return Err(Error::InvalidConfig("theta bounds differ in length".into()));
        }
        let mut lower: Vec<f64> = self.theta_lower.iter().map(|v| v.ln()).collect();
        let mut upper: Vec<f64> = self.theta_upper.iter().map(|v| v.ln()).collect();
        match self.eta {
            EtaBounds::Range { lower: l, upper: u } => {
                lower.push(l.ln());
                upper.push(u.ln());
            }
            EtaBounds::Fixed(v) => {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::InvalidConfig(format!("fixed eta must be >= 0, got {v}")));
                }
            }
        }
        BoxBounds::new(lower, upper)
    }

    /// Maps log coordinates back to `(theta, eta)`.
    pub fn decode(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim();
        let theta = u[..d].iter().map(|v| v.exp()).collect();
        let eta = match self.eta {
            EtaBounds::Range { .. } => u[d].exp(),
            EtaBounds::Fixed(v) => v,
        };
        (theta, eta)
    }

    /// Log coordinates of `(theta, eta)`, clamped into the box.
    pub fn encode(&self, theta: &[f64], eta: f64) -> Vec<f64> {
        let mut u: Vec<f64> = theta
            .iter()
            .zip(self.theta_lower.iter().zip(&self.theta_upper))
            .map(|(t, (l, h))| t.clamp(*l, *h).ln())
            .collect();
        if let EtaBounds::Range { lower, upper } = self.eta {
            u.push(eta.clamp(lower, upper).ln());
        }
        u
    }

    /// Converts a gradient over raw `(theta, eta)` to one over the log
    /// coordinates of [`Self::log_box`].
    pub fn chain_rule(&self, theta: &[f64], eta: f64, grad: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out: Vec<f64> = (0..d).map(|i| grad[i] * theta[i]).collect();
        if matches!(self.eta, EtaBounds::Range { .. }) {
            out.push(grad[d] * eta);
        }
        out
    }
}

/// Summary of one multi-start run, kept for diagnostics and serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: Vec<f64>,
    pub value: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitLog {
    pub starts: Vec<StartSummary>,
    pub final_nll: f64,
}

impl FitLog {
    pub(crate) fn from_multi_start(res: &crate::optimize::MultiStartResult) -> Self {
        Self {
            starts: res
                .log
                .iter()
                .map(|r| StartSummary {
                    start: r.start.clone(),
                    value: r.outcome.as_ref().ok().map(|o| o.value),
                    converged: r.outcome.as_ref().is_ok_and(|o| o.converged),
                })
                .collect(),
            final_nll: res.best.value,
        }
    }
}

/// Quantities shared by the profiled estimates, the likelihood and its gradient.
pub(crate) struct Profile {
    pub factorization: SpdFactorization,
    pub correlation: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    /// `(R + eta I)⁻¹ (z - F beta)`.
    pub alpha: DVector<f64>,
}

/// Generalized least squares of `z` on `h` under covariance `factorization`.
/// Returns the coefficients and the half-solved residual `L⁻¹(z - h β)`.
pub(crate) fn gls(
    factorization: &SpdFactorization,
    h: &DMatrix<f64>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let hs = factorization.half_solve(h)?;
    let zs = factorization.half_solve(&DMatrix::from_column_slice(z.len(), 1, z.as_slice()))?;
    let zs = zs.column(0).into_owned();
    let qr = hs.clone().qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if h.ncols() > h.nrows() || max_diag == 0.0 || r.diagonal().iter().any(|v| v.abs() <= RANK_TOLERANCE * max_diag) {
        return Err(Error::RankDeficientBasis);
    }
    let qtz = qr.q().transpose() * &zs;
    let beta = r.solve_upper_triangular(&qtz).ok_or(Error::RankDeficientBasis)?;
    let resid = zs - hs * &beta;
    Ok((beta, resid))
}

pub(crate) fn profile(data: &Dataset, f: &DMatrix<f64>, theta: &LengthScales, eta: f64) -> Result<Profile> {
    let correlation = corr_matrix_sym(&data.x, theta)?;
    let mut m = correlation.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += eta;
    }
    let factorization =
        chol_factor(&m, &JitterPolicy::default()).map_err(|e| Error::FactorizationFailure(e.to_string()))?;
    let (beta, half_resid) = gls(&factorization, f, &data.z)?;
    let sigma2 = half_resid.norm_squared() / data.len() as f64;
    let mut alpha = half_resid;
    factorization.lower_factor().tr_solve_lower_triangular_mut(&mut alpha);
    Ok(Profile {
        factorization,
        correlation,
        beta,
        sigma2,
        alpha,
    })
}

fn check_fit_inputs(data: &Dataset, basis: &BasisSpec, theta: &LengthScales, eta: f64) -> Result<DMatrix<f64>> {
    if theta.dim() != data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} length scales for {}-dimensional inputs",
            theta.dim(),
            data.dim()
        )));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidConfig(format!("eta must be >= 0, got {eta}")));
    }
    basis.design_matrix(&data.x)
}

/// Closed-form GLS mean coefficients and variance for fixed `(theta, eta)`.
pub fn profiled_estimates(
    data: &Dataset,
    basis: &BasisSpec,
    theta: &LengthScales,
    eta: f64,
) -> Result<(DVector<f64>, f64)> {
    let f = check_fit_inputs(data, basis, theta, eta)?;
    let p = profile(data, &f, theta, eta)?;
    Ok((p.beta, p.sigma2))
}

/// Negative profiled log-likelihood and its gradient over raw `(theta_1..theta_D, eta)`.
pub fn profiled_nll_and_grad(
    data: &Dataset,
    basis: &BasisSpec,
    theta: &LengthScales,
    eta: f64,
) -> Result<(f64, DVector<f64>)> {
    let f = check_fit_inputs(data, basis, theta, eta)?;
    let p = profile(data, &f, theta, eta)?;
    if !(p.sigma2 > SIGMA2_FLOOR) {
        return Err(Error::DegenerateResidual);
    }
    let n = data.len() as f64;
    let value = 0.5 * n * p.sigma2.ln() + 0.5 * p.factorization.logdet() + 0.5 * n * (1.0 + LN_2PI);

    let inv = p.factorization.inverse();
    let kappa = &p.alpha / p.sigma2.sqrt();
    let dim = data.dim();
    let mut grad = DVector::zeros(dim + 1);
    for d in 0..dim {
        let dr = corr_matrix_grad_from(&data.x, &p.correlation, theta, d)?;
        let quad = kappa.dot(&(&dr * &kappa));
        let trace = inv.component_mul(&dr).sum();
        grad[d] = -0.5 * (quad - trace);
    }
    grad[dim] = -0.5 * (kappa.norm_squared() - inv.trace());
    Ok((value, grad))
}

/// A fitted GP with its cached factorization of `R(theta) + eta I`.
#[derive(Debug, Clone)]
pub struct TrainedGp {
    data: Dataset,
    basis: BasisSpec,
    hyper: GpHyper,
    factorization: SpdFactorization,
    residual_solve: DVector<f64>,
    fit_log: FitLog,
}

impl TrainedGp {
    /// Rebuilds the cached quantities from stored hyperparameters.
    pub fn from_hyper(data: Dataset, basis: BasisSpec, hyper: GpHyper, fit_log: FitLog) -> Result<Self> {
        let f = check_fit_inputs(&data, &basis, &hyper.kernel.theta, hyper.kernel.eta)?;
        if hyper.beta.len() != basis.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} mean coefficients for a basis of size {}",
                hyper.beta.len(),
                basis.len()
            )));
        }
        let mut m = corr_matrix_sym(&data.x, &hyper.kernel.theta)?;
        for i in 0..m.nrows() {
            m[(i, i)] += hyper.kernel.eta;
        }
        let factorization =
            chol_factor(&m, &JitterPolicy::default()).map_err(|e| Error::FactorizationFailure(e.to_string()))?;
        let resid = &data.z - f * &hyper.beta;
        let residual_solve = factorization.solve_vec(&resid)?;
        Ok(Self {
            data,
            basis,
            hyper,
            factorization,
            residual_solve,
            fit_log,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn factorization(&self) -> &SpdFactorization {
        &self.factorization
    }

    pub fn residual_solve(&self) -> &DVector<f64> {
        &self.residual_solve
    }

    pub fn fit_log(&self) -> &FitLog {
        &self.fit_log
    }

    pub fn noise_variance(&self) -> f64 {
        self.hyper.kernel.noise_variance()
    }

    fn check_dim(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.data.dim() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, prediction points have {}",
                self.data.dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Posterior mean `m_Y` at every row of `x`.
    pub fn posterior_mean(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let r = corr_matrix(&x.clone_owned(), &self.data.x, &self.hyper.kernel.theta)?;
        Ok(self.basis.design_matrix(x)? * &self.hyper.beta + r * &self.residual_solve)
    }

    /// Latent posterior covariance `v_Y(x1, x2)` between two sets of points.
    pub fn posterior_cross_cov(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x1)?;
        self.check_dim(x2)?;
        let theta = &self.hyper.kernel.theta;
        let v1 = self.factorization.half_solve(&corr_matrix(&self.data.x, x1, theta)?)?;
        let v2 = self.factorization.half_solve(&corr_matrix(&self.data.x, x2, theta)?)?;
        let prior = corr_matrix(x1, x2, theta)?;
        Ok((prior - v1.transpose() * v2) * self.hyper.kernel.sigma2)
    }

    /// Kriging mean and covariance at every row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>, mode: PredictMode, cov: CovarianceKind) -> Result<PredictiveDistribution> {
        self.check_dim(x)?;
        let theta = &self.hyper.kernel.theta;
        let sigma2 = self.hyper.kernel.sigma2;
        let cross = corr_matrix(&self.data.x, x, theta)?;
        let mean = self.basis.design_matrix(x)? * &self.hyper.beta + cross.tr_mul(&self.residual_solve);
        let v = self.factorization.half_solve(&cross)?;
        let noise = match mode {
            PredictMode::Latent => 0.0,
            PredictMode::Noisy => self.noise_variance(),
        };
        let covariance = match cov {
            CovarianceKind::Diagonal => Covariance::Diagonal(DVector::from_fn(x.nrows(), |j, _| {
                let s = sigma2 * (1.0 - v.column(j).norm_squared());
                s.max(0.0) + noise
            })),
            CovarianceKind::Full => {
                let mut c = (corr_matrix_sym(x, theta)? - v.tr_mul(&v)) * sigma2;
                for i in 0..c.nrows() {
                    c[(i, i)] = c[(i, i)].max(0.0) + noise;
                }
                Covariance::Full(c)
            }
        };
        Ok(PredictiveDistribution { mean, covariance })
    }
}

pub fn predict_gp(
    model: &TrainedGp,
    x_star: &DMatrix<f64>,
    mode: PredictMode,
    cov: CovarianceKind,
) -> Result<PredictiveDistribution> {
    model.predict(x_star, mode, cov)
}

/// Objective over log `(theta, eta)` for the optimizer; failures map to `+inf`.
fn log_space_objective<'a>(
    data: &'a Dataset,
    basis: &'a BasisSpec,
    bounds: &'a HyperBounds,
) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) + 'a {
    move |u: &[f64]| {
        let (theta, eta) = bounds.decode(u);
        let Ok(ls) = LengthScales::new(theta.clone()) else {
            return (f64::INFINITY, vec![0.0; u.len()]);
        };
        match profiled_nll_and_grad(data, basis, &ls, eta) {
            Ok((v, g)) => (v, bounds.chain_rule(&theta, eta, g.as_slice())),
            Err(_) => (f64::INFINITY, vec![0.0; u.len()]),
        }
    }
}

/// Multi-start maximum-likelihood fit of `(theta, eta)` with closed-form
/// `beta` and `sigma2`.
pub fn fit_gp(data: &Dataset, basis: &BasisSpec, bounds: &HyperBounds, config: &MultiStartConfig) -> Result<TrainedGp> {
    if data.len() < basis.len() + 1 {
        return Err(Error::InvalidConfig(format!(
            "need at least {} training points for a basis of size {}, got {}",
            basis.len() + 1,
            basis.len(),
            data.len()
        )));
    }
    if bounds.dim() != data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "bounds cover {} dimensions, data has {}",
            bounds.dim(),
            data.dim()
        )));
    }
    let f = basis.design_matrix(&data.x)?;
    let qr_check = f.clone().qr();
    let rd = qr_check.r().diagonal();
    let max_diag = rd.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if max_diag == 0.0 || rd.iter().any(|v| v.abs() <= RANK_TOLERANCE * max_diag) {
        return Err(Error::RankDeficientBasis);
    }

    let log_box = bounds.log_box()?;
    let result = multi_start_minimize_with(log_space_objective(data, basis, bounds), &log_box, config, &[])?;
    let (theta, eta) = bounds.decode(&result.best.x);
    let theta = LengthScales::new(theta)?;
    let (beta, sigma2) = profiled_estimates(data, basis, &theta, eta)?;
    let kernel = KernelParams::new(theta, sigma2, eta)?;
    TrainedGp::from_hyper(
        data.clone(),
        basis.clone(),
        GpHyper { beta, kernel },
        FitLog::from_multi_start(&result),
    )
}
