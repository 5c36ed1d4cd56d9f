//! Recursive AR(1) multi-fidelity GP: the HF level is
//! `Y_H(x) = rho(x) Y_L~(x) + Delta_H(x)`, where `Y_L~` is the LF posterior.
//!
//! The LF model is fitted on its own. The HF parameters are then estimated by
//! EM, treating the LF posterior values at the HF inputs as latent variables,
//! so no factorization ever spans both levels.

mod em;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Covariance, CovarianceKind, Dataset, Fidelity, PredictMode, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::gp::{fit_gp, BasisSpec, HyperBounds, TrainedGp};
use crate::kernels::{corr_matrix, corr_matrix_sym, LengthScales};
use crate::numerics::SpdFactorization;
use crate::optimize::MultiStartConfig;

pub use em::{
    e_step, em_fit_hf, hf_observed_loglik, m_step_closed_forms, q_prime, q_tilde_and_grad, EStepState, EmConfig, EmLog,
    LfMomentsAtHf, NON_MONOTONE_TOLERANCE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfData {
    pub lf: Dataset,
    pub hf: Dataset,
}

impl MfData {
    /// The HF inputs need not be a subset of the LF inputs.
    pub fn new(lf: Dataset, hf: Dataset) -> Result<Self> {
        if lf.dim() != hf.dim() {
            return Err(Error::DimensionMismatch(format!(
                "LF inputs have {} columns, HF inputs have {}",
                lf.dim(),
                hf.dim()
            )));
        }
        Ok(Self { lf, hf })
    }
}

/// HF parameters: scaling `rho(x) = g(x)ᵀ beta_rho`, discrepancy mean
/// coefficients, discrepancy variance, length scales and noise ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HfParams {
    pub beta_rho: DVector<f64>,
    pub beta_h: DVector<f64>,
    pub sigma2_h: f64,
    pub theta_h: LengthScales,
    pub eta_h: f64,
}

impl HfParams {
    pub fn noise_variance(&self) -> f64 {
        self.eta_h * self.sigma2_h
    }

    pub(crate) fn check_shapes(&self, hf_basis: &BasisSpec, rho_basis: &BasisSpec, dim: usize) -> Result<()> {
        if self.beta_rho.len() != rho_basis.len() || self.beta_h.len() != hf_basis.len() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient lengths ({}, {}) do not match bases ({}, {})",
                self.beta_rho.len(),
                self.beta_h.len(),
                rho_basis.len(),
                hf_basis.len()
            )));
        }
        if self.theta_h.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{} HF length scales for {dim}-dimensional inputs",
                self.theta_h.dim()
            )));
        }
        if !(self.sigma2_h >= 0.0 && self.sigma2_h.is_finite()) || !(self.eta_h >= 0.0 && self.eta_h.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma2_h = {} and eta_h = {} must be finite and non-negative",
                self.sigma2_h, self.eta_h
            )));
        }
        Ok(())
    }
}

/// Defaults: constant bases for all three regressions and default bounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub lf_basis: BasisSpec,
    pub hf_basis: BasisSpec,
    pub rho_basis: BasisSpec,
    /// `None` uses [`HyperBounds::default_for`] on the LF inputs.
    pub lf_bounds: Option<HyperBounds>,
    pub hf_bounds: Option<HyperBounds>,
    pub optimizer: MultiStartConfig,
    pub em: EmConfig,
}

/// LF posterior mean and full latent covariance at the rows of `x`.
pub fn lf_posterior_moments(lf_model: &TrainedGp, x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let pred = lf_model.predict(x, PredictMode::Latent, CovarianceKind::Full)?;
    match pred.covariance {
        Covariance::Full(c) => Ok((pred.mean, c)),
        Covariance::Diagonal(_) => unreachable!("full covariance requested"),
    }
}

/// A fitted multi-fidelity model with the co-kriging factorization cached.
#[derive(Debug, Clone)]
pub struct MfModel {
    lf_model: TrainedGp,
    hf_data: Dataset,
    hf_params: HfParams,
    hf_basis: BasisSpec,
    rho_basis: BasisSpec,
    em_log: EmLog,
    rho_at_hf: DVector<f64>,
    lf_cov_at_hf: DMatrix<f64>,
    /// Factorization of `K_AR + sigma2_eps_H I`.
    factorization: SpdFactorization,
    /// `(K_AR + sigma2_eps_H I)⁻¹ (z_H - m_AR(X_H))`.
    residual_solve: DVector<f64>,
}

impl MfModel {
    /// Rebuilds the cached quantities from stored parameters; used both after
    /// fitting and when loading a saved model.
    pub fn from_parts(
        lf_model: TrainedGp,
        hf_data: Dataset,
        hf_params: HfParams,
        hf_basis: BasisSpec,
        rho_basis: BasisSpec,
        em_log: EmLog,
    ) -> Result<Self> {
        if hf_data.dim() != lf_model.data().dim() {
            return Err(Error::DimensionMismatch(format!(
                "LF model has {} inputs, HF data has {}",
                lf_model.data().dim(),
                hf_data.dim()
            )));
        }
        hf_params.check_shapes(&hf_basis, &rho_basis, hf_data.dim())?;
        let moments = LfMomentsAtHf::compute(&lf_model, &hf_data.x)?;
        let rho_at_hf = rho_basis.design_matrix(&hf_data.x)? * &hf_params.beta_rho;
        let c = em::hf_marginal_cov(&rho_at_hf, &moments.cov, &hf_data.x, &hf_params)?;
        let factorization = em::factor(&c)?;
        let m_ar = rho_at_hf.component_mul(&moments.mean) + hf_basis.design_matrix(&hf_data.x)? * &hf_params.beta_h;
        let residual_solve = factorization.solve_vec(&(&hf_data.z - m_ar))?;
        Ok(Self {
            lf_model,
            hf_data,
            hf_params,
            hf_basis,
            rho_basis,
            em_log,
            rho_at_hf,
            lf_cov_at_hf: moments.cov,
            factorization,
            residual_solve,
        })
    }

    pub fn lf_model(&self) -> &TrainedGp {
        &self.lf_model
    }

    pub fn hf_data(&self) -> &Dataset {
        &self.hf_data
    }

    pub fn hf_params(&self) -> &HfParams {
        &self.hf_params
    }

    pub fn hf_basis(&self) -> &BasisSpec {
        &self.hf_basis
    }

    pub fn rho_basis(&self) -> &BasisSpec {
        &self.rho_basis
    }

    pub fn em_log(&self) -> &EmLog {
        &self.em_log
    }

    pub fn factorization(&self) -> &SpdFactorization {
        &self.factorization
    }

    pub fn residual_solve(&self) -> &DVector<f64> {
        &self.residual_solve
    }

    fn check_dim(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.hf_data.dim() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, prediction points have {}",
                self.hf_data.dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// `m_AR` at `x_star`, the cross-covariance `k_AR(x_star, X_H)` and `K_AR`
    /// at the HF training inputs.
    pub fn ar_moments(&self, x_star: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        self.check_dim(x_star)?;
        let p = &self.hf_params;
        let rho_star = self.rho_basis.design_matrix(x_star)? * &p.beta_rho;
        let m_l = self.lf_model.posterior_mean(x_star)?;
        let m_ar = rho_star.component_mul(&m_l) + self.hf_basis.design_matrix(x_star)? * &p.beta_h;
        let v_cross = self.lf_model.posterior_cross_cov(x_star, &self.hf_data.x)?;
        let r_cross = corr_matrix(x_star, &self.hf_data.x, &p.theta_h)?;
        let k_cross = DMatrix::from_fn(x_star.nrows(), self.hf_data.len(), |i, j| {
            rho_star[i] * self.rho_at_hf[j] * v_cross[(i, j)] + p.sigma2_h * r_cross[(i, j)]
        });
        let r_h = corr_matrix_sym(&self.hf_data.x, &p.theta_h)?;
        let rho = &self.rho_at_hf;
        let n = rho.len();
        let k_ar = DMatrix::from_fn(n, n, |i, j| {
            rho[i] * rho[j] * self.lf_cov_at_hf[(i, j)] + p.sigma2_h * r_h[(i, j)]
        });
        Ok((m_ar, k_cross, k_ar))
    }

    fn predict_hf(&self, x: &DMatrix<f64>, mode: PredictMode, cov: CovarianceKind) -> Result<PredictiveDistribution> {
        self.check_dim(x)?;
        let p = &self.hf_params;
        let rho_star = self.rho_basis.design_matrix(x)? * &p.beta_rho;
        let m_l = self.lf_model.posterior_mean(x)?;
        let m_ar = rho_star.component_mul(&m_l) + self.hf_basis.design_matrix(x)? * &p.beta_h;
        let v_cross = self.lf_model.posterior_cross_cov(x, &self.hf_data.x)?;
        let r_cross = corr_matrix(x, &self.hf_data.x, &p.theta_h)?;
        // Stored as N_H x M so the half-solve acts on columns.
        let k_cross_t = DMatrix::from_fn(self.hf_data.len(), x.nrows(), |j, i| {
            rho_star[i] * self.rho_at_hf[j] * v_cross[(i, j)] + p.sigma2_h * r_cross[(i, j)]
        });
        let mean = m_ar + k_cross_t.tr_mul(&self.residual_solve);
        let w = self.factorization.half_solve(&k_cross_t)?;
        let noise = match mode {
            PredictMode::Latent => 0.0,
            PredictMode::Noisy => p.noise_variance(),
        };
        let covariance = match cov {
            CovarianceKind::Diagonal => {
                let v_l = self
                    .lf_model
                    .predict(x, PredictMode::Latent, CovarianceKind::Diagonal)?
                    .variances();
                Covariance::Diagonal(DVector::from_fn(x.nrows(), |i, _| {
                    let prior = rho_star[i] * rho_star[i] * v_l[i] + p.sigma2_h;
                    (prior - w.column(i).norm_squared()).max(0.0) + noise
                }))
            }
            CovarianceKind::Full => {
                let (_, v_l) = lf_posterior_moments(&self.lf_model, x)?;
                let r = corr_matrix_sym(x, &p.theta_h)?;
                let m = x.nrows();
                let wtw = w.tr_mul(&w);
                let mut c = DMatrix::from_fn(m, m, |i, j| {
                    rho_star[i] * rho_star[j] * v_l[(i, j)] + p.sigma2_h * r[(i, j)] - wtw[(i, j)]
                });
                for i in 0..m {
                    c[(i, i)] = c[(i, i)].max(0.0) + noise;
                }
                Covariance::Full(c)
            }
        };
        Ok(PredictiveDistribution { mean, covariance })
    }
}

/// Fits the LF GP on LF data alone, then the HF parameters by EM.
pub fn fit_mf(data: &MfData, config: &MfConfig) -> Result<MfModel> {
    let lf_bounds = config
        .lf_bounds
        .clone()
        .unwrap_or_else(|| HyperBounds::default_for(&data.lf.x));
    let hf_bounds = config
        .hf_bounds
        .clone()
        .unwrap_or_else(|| HyperBounds::default_for(&data.hf.x));
    let lf_model = fit_gp(&data.lf, &config.lf_basis, &lf_bounds, &config.optimizer)?;
    let (hf_params, em_log) = em_fit_hf(
        data,
        &lf_model,
        &config.hf_basis,
        &config.rho_basis,
        &hf_bounds,
        &config.optimizer,
        &config.em,
    )?;
    MfModel::from_parts(
        lf_model,
        data.hf.clone(),
        hf_params,
        config.hf_basis.clone(),
        config.rho_basis.clone(),
        em_log,
    )
}

pub fn predict_mf(
    model: &MfModel,
    x_star: &DMatrix<f64>,
    level: Fidelity,
    mode: PredictMode,
    cov: CovarianceKind,
) -> Result<PredictiveDistribution> {
    match level {
        Fidelity::Low => model.lf_model.predict(x_star, mode, cov),
        Fidelity::High => model.predict_hf(x_star, mode, cov),
    }
}

#[cfg(test)]
mod tests;
