//! E-step matrices, closed-form M-step updates, the profiled auxiliary
//! objective over `(theta_H, eta_H)` and the EM driver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::derive_seed;
use crate::error::{Error, Result};
use crate::gp::{BasisSpec, HyperBounds, TrainedGp};
use crate::kernels::{corr_matrix_grad_from, corr_matrix_sym, input_ranges, LengthScales};
use crate::numerics::{chol_factor, JitterPolicy, SpdFactorization};
use crate::optimize::{multi_start_minimize_with, MultiStartConfig};

use super::{HfParams, MfData};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SIGMA2_FLOOR: f64 = 1e-300;
const RANK_TOLERANCE: f64 = 1e-12;

/// Slack allowed on a single EM step before the run is declared non-monotone.
pub const NON_MONOTONE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_em_iterations: usize,
    pub loglik_rel_tolerance: f64,
    /// Random starts per M-step after the first iteration, which uses the
    /// full multi-start count.
    pub inner_starts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_em_iterations: 100,
            loglik_rel_tolerance: 1e-8,
            inner_starts: 5,
        }
    }
}

/// Observed-data log-likelihood before the first and after every EM
/// iteration, with the matching parameter iterates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmLog {
    pub loglik: Vec<f64>,
    pub iterates: Vec<HfParams>,
    pub converged: bool,
}

/// LF posterior moments at the HF training inputs. They depend only on the
/// fitted LF model, so EM computes them once.
#[derive(Debug, Clone)]
pub struct LfMomentsAtHf {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LfMomentsAtHf {
    pub fn compute(lf_model: &TrainedGp, x_h: &DMatrix<f64>) -> Result<Self> {
        let mean = lf_model.posterior_mean(x_h)?;
        let mut cov = lf_model.posterior_cross_cov(x_h, x_h)?;
        symmetrize(&mut cov);
        Ok(Self { mean, cov })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct EStepState {
    pub sigma_yz: DMatrix<f64>,
    pub sigma_zz: DMatrix<f64>,
    pub mu_y_given_z: DVector<f64>,
    pub sigma_y_given_z: DMatrix<f64>,
    /// `[G_L ⊙ (mu 1ᵀ), F_H]`.
    pub h_matrix: DMatrix<f64>,
    pub g_matrix: DMatrix<f64>,
    pub lf_mean_at_hf: DVector<f64>,
    pub lf_cov_at_hf: DMatrix<f64>,
}

impl EStepState {
    pub fn q(&self) -> usize {
        self.g_matrix.ncols()
    }
}

/// Marginal covariance of the HF observations:
/// `(rho rhoᵀ) ⊙ V_L + sigma2_H (R_H + eta_H I)`.
pub(crate) fn hf_marginal_cov(
    rho: &DVector<f64>,
    lf_cov: &DMatrix<f64>,
    x_h: &DMatrix<f64>,
    params: &HfParams,
) -> Result<DMatrix<f64>> {
    let r = corr_matrix_sym(x_h, &params.theta_h)?;
    let n = rho.len();
    let mut c = DMatrix::from_fn(n, n, |i, j| {
        rho[i] * rho[j] * lf_cov[(i, j)] + params.sigma2_h * r[(i, j)]
    });
    for i in 0..n {
        c[(i, i)] += params.sigma2_h * params.eta_h;
    }
    Ok(c)
}

pub(crate) fn factor(m: &DMatrix<f64>) -> Result<SpdFactorization> {
    chol_factor(m, &JitterPolicy::default()).map_err(|e| Error::FactorizationFailure(e.to_string()))
}

pub(crate) fn e_step_from_moments(
    moments: &LfMomentsAtHf,
    hf: &Dataset,
    g: &DMatrix<f64>,
    f_h: &DMatrix<f64>,
    params: &HfParams,
) -> Result<EStepState> {
    let n = hf.len();
    let rho = g * &params.beta_rho;
    let v = &moments.cov;
    let sigma_yz = DMatrix::from_fn(n, n, |i, j| rho[j] * v[(i, j)]);
    let sigma_zz = hf_marginal_cov(&rho, v, &hf.x, params)?;
    let fact = factor(&sigma_zz)?;

    let resid = &hf.z - rho.component_mul(&moments.mean) - f_h * &params.beta_h;
    let mu = &moments.mean + &sigma_yz * fact.solve_vec(&resid)?;
    let w = fact.half_solve(&sigma_yz.transpose())?;
    let mut sigma_y_given_z = v - w.tr_mul(&w);
    symmetrize(&mut sigma_y_given_z);

    let q = g.ncols();
    let p = f_h.ncols();
    let h_matrix = DMatrix::from_fn(n, q + p, |i, j| if j < q { g[(i, j)] * mu[i] } else { f_h[(i, j - q)] });
    Ok(EStepState {
        sigma_yz,
        sigma_zz,
        mu_y_given_z: mu,
        sigma_y_given_z,
        h_matrix,
        g_matrix: g.clone(),
        lf_mean_at_hf: moments.mean.clone(),
        lf_cov_at_hf: moments.cov.clone(),
    })
}

/// Builds the conditional moments of the latent LF values at the HF inputs
/// given the HF observations, and the M-step design matrix.
pub fn e_step(
    data: &MfData,
    lf_model: &TrainedGp,
    params: &HfParams,
    hf_basis: &BasisSpec,
    rho_basis: &BasisSpec,
) -> Result<EStepState> {
    params.check_shapes(hf_basis, rho_basis, data.hf.dim())?;
    let moments = LfMomentsAtHf::compute(lf_model, &data.hf.x)?;
    let g = rho_basis.design_matrix(&data.hf.x)?;
    let f_h = hf_basis.design_matrix(&data.hf.x)?;
    e_step_from_moments(&moments, &data.hf, &g, &f_h, params)
}

/// Everything the closed forms and the gradient share for one `(theta_H, eta_H)`.
struct MStepProfile {
    correlation: DMatrix<f64>,
    rinv: DMatrix<f64>,
    logdet: f64,
    beta: DVector<f64>,
    sigma2: f64,
    /// `R~⁻¹ (z - H beta)`.
    alpha: DVector<f64>,
}

fn m_step_profile(state: &EStepState, hf: &Dataset, theta: &LengthScales, eta: f64) -> Result<MStepProfile> {
    if theta.dim() != hf.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} length scales for {}-dimensional inputs",
            theta.dim(),
            hf.dim()
        )));
    }
    let n = hf.len();
    let q = state.q();
    let h = &state.h_matrix;
    let k = h.ncols();

    let correlation = corr_matrix_sym(&hf.x, theta)?;
    let mut rt = correlation.clone();
    for i in 0..n {
        rt[(i, i)] += eta;
    }
    let fact = factor(&rt)?;
    let rinv = fact.inverse();

    // Upper-left block of T: G_Lᵀ (R~⁻¹ ⊙ Sigma_Y|Z) G_L.
    let t_small = state
        .g_matrix
        .tr_mul(&(rinv.component_mul(&state.sigma_y_given_z) * &state.g_matrix));
    let t_small = (&t_small + t_small.transpose()) * 0.5;

    // Minimize |L⁻¹(z - H b)|² + bᵀ T b as a stacked least-squares problem
    // [L⁻¹H; T^½] b ≈ [L⁻¹z; 0].
    let eig = t_small.clone().symmetric_eigen();
    let t_sqrt = DMatrix::from_fn(q, q, |i, j| {
        (0..q)
            .map(|m| eig.eigenvectors[(i, m)] * eig.eigenvalues[m].max(0.0).sqrt() * eig.eigenvectors[(j, m)])
            .sum::<f64>()
    });
    let hs = fact.half_solve(h)?;
    let zs = fact.half_solve(&DMatrix::from_column_slice(n, 1, hf.z.as_slice()))?;
    let mut a = DMatrix::zeros(n + q, k);
    a.view_mut((0, 0), (n, k)).copy_from(&hs);
    a.view_mut((n, 0), (q, q)).copy_from(&t_sqrt);
    let mut rhs = DVector::zeros(n + q);
    rhs.rows_mut(0, n).copy_from(&zs.column(0));
    if k > n + q {
        return Err(Error::SingularNormalEquations);
    }
    let qr = a.qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_diag == 0.0 || r.diagonal().iter().any(|v| v.abs() <= RANK_TOLERANCE * max_diag) {
        return Err(Error::SingularNormalEquations);
    }
    let beta = r
        .solve_upper_triangular(&(qr.q().transpose() * rhs))
        .ok_or(Error::SingularNormalEquations)?;

    let resid = &hf.z - h * &beta;
    let half_resid = fact.half_solve(&DMatrix::from_column_slice(n, 1, resid.as_slice()))?;
    let quad = half_resid.norm_squared();
    let beta_rho = beta.rows(0, q);
    let penalty = beta_rho.dot(&(&t_small * beta_rho));
    let sigma2 = (quad + penalty) / n as f64;
    let alpha = fact.solve_vec(&resid)?;
    Ok(MStepProfile {
        correlation,
        rinv,
        logdet: fact.logdet(),
        beta,
        sigma2,
        alpha,
    })
}

/// Closed-form `(beta_rho, beta_H)` (stacked) and `sigma2_H` maximizing the
/// auxiliary function for fixed `(theta_H, eta_H)`.
pub fn m_step_closed_forms(
    state: &EStepState,
    hf: &Dataset,
    theta_h: &LengthScales,
    eta_h: f64,
) -> Result<(DVector<f64>, f64)> {
    let p = m_step_profile(state, hf, theta_h, eta_h)?;
    Ok((p.beta, p.sigma2))
}

/// The auxiliary function `Q'` itself (not profiled), for a full parameter set.
pub fn q_prime(
    state: &EStepState,
    hf: &Dataset,
    beta_rho_h: &DVector<f64>,
    sigma2: f64,
    theta: &LengthScales,
    eta: f64,
) -> Result<f64> {
    let n = hf.len();
    let q = state.q();
    let mut rt = corr_matrix_sym(&hf.x, theta)?;
    for i in 0..n {
        rt[(i, i)] += eta;
    }
    let fact = factor(&rt)?;
    let rinv = fact.inverse();
    let t_small = state
        .g_matrix
        .tr_mul(&(rinv.component_mul(&state.sigma_y_given_z) * &state.g_matrix));
    let b = beta_rho_h.rows(0, q);
    let resid = &hf.z - &state.h_matrix * beta_rho_h;
    let quad = resid.dot(&fact.solve_vec(&resid)?);
    Ok(-0.5 * n as f64 * sigma2.ln()
        - 0.5 * fact.logdet()
        - (b.dot(&(&t_small * b)) + quad) / (2.0 * sigma2)
        - 0.5 * n as f64 * LN_2PI)
}

/// Negated profiled auxiliary function over `(theta_H, eta_H)` and its
/// gradient with respect to the raw `(theta_1..theta_D, eta)`.
pub fn q_tilde_and_grad(
    state: &EStepState,
    hf: &Dataset,
    theta_h: &LengthScales,
    eta_h: f64,
) -> Result<(f64, DVector<f64>)> {
    let p = m_step_profile(state, hf, theta_h, eta_h)?;
    if !(p.sigma2 > SIGMA2_FLOOR) {
        return Err(Error::DegenerateResidual);
    }
    let n = hf.len();
    let nf = n as f64;
    let value = 0.5 * nf * p.sigma2.ln() + 0.5 * p.logdet + 0.5 * nf * (1.0 + LN_2PI);

    let q = state.q();
    let rho = &state.g_matrix * p.beta.rows(0, q);
    let kappa = &p.alpha / p.sigma2.sqrt();
    // rhoᵀ((R~⁻¹ dR R~⁻¹) ⊙ S) rho = sum(dR ⊙ R~⁻¹ (S ⊙ rho rhoᵀ) R~⁻¹) for symmetric dR.
    let weighted = DMatrix::from_fn(n, n, |i, j| state.sigma_y_given_z[(i, j)] * rho[i] * rho[j]);
    let sandwich = &p.rinv * weighted * &p.rinv;

    let dim = hf.dim();
    let mut grad = DVector::zeros(dim + 1);
    for d in 0..dim {
        let dr = corr_matrix_grad_from(&hf.x, &p.correlation, theta_h, d)?;
        let quad = kappa.dot(&(&dr * &kappa));
        let trace = p.rinv.component_mul(&dr).sum();
        let latent = dr.component_mul(&sandwich).sum();
        grad[d] = -0.5 * (quad - trace + latent / p.sigma2);
    }
    grad[dim] = -0.5 * (kappa.norm_squared() - p.rinv.trace() + sandwich.trace() / p.sigma2);
    Ok((value, grad))
}

/// Exact Gaussian log-density of the HF observations: mean `m_AR(X_H)`,
/// covariance `K_AR + sigma2_eps_H I`.
pub fn hf_observed_loglik(
    data: &MfData,
    lf_model: &TrainedGp,
    params: &HfParams,
    hf_basis: &BasisSpec,
    rho_basis: &BasisSpec,
) -> Result<f64> {
    params.check_shapes(hf_basis, rho_basis, data.hf.dim())?;
    let moments = LfMomentsAtHf::compute(lf_model, &data.hf.x)?;
    let g = rho_basis.design_matrix(&data.hf.x)?;
    let f_h = hf_basis.design_matrix(&data.hf.x)?;
    observed_loglik_from_moments(&moments, &data.hf, &g, &f_h, params)
}

pub(crate) fn observed_loglik_from_moments(
    moments: &LfMomentsAtHf,
    hf: &Dataset,
    g: &DMatrix<f64>,
    f_h: &DMatrix<f64>,
    params: &HfParams,
) -> Result<f64> {
    let rho = g * &params.beta_rho;
    let c = hf_marginal_cov(&rho, &moments.cov, &hf.x, params)?;
    let fact = factor(&c)?;
    let resid = &hf.z - rho.component_mul(&moments.mean) - f_h * &params.beta_h;
    let half = fact.half_solve(&DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()))?;
    Ok(-0.5 * (half.norm_squared() + fact.logdet() + hf.len() as f64 * LN_2PI))
}

/// Least-squares coefficients of `y` on the columns of `a`.
fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .map_err(|_| Error::RankDeficientBasis)
}

/// Scale-aware EM starting point: identity scaling, discrepancy mean and
/// variance from the residual after scaling, length scales equal to the
/// input ranges and `eta = 0.1`.
pub(crate) fn initial_params(
    moments: &LfMomentsAtHf,
    hf: &Dataset,
    g: &DMatrix<f64>,
    f_h: &DMatrix<f64>,
    bounds: &HyperBounds,
) -> Result<HfParams> {
    let beta_rho = least_squares(g, &DVector::from_element(hf.len(), 1.0))?;
    let rho = g * &beta_rho;
    let scaled = &hf.z - rho.component_mul(&moments.mean);
    let beta_h = least_squares(f_h, &scaled)?;
    let resid = &scaled - f_h * &beta_h;
    let n = hf.len() as f64;
    let var = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let z_mean = hf.z.mean();
    let z_var = hf.z.iter().map(|v| (v - z_mean).powi(2)).sum::<f64>() / n;
    let sigma2_h = var.max(1e-12 * (1.0 + z_var));
    let ranges = input_ranges(&hf.x);
    let (theta, eta) = bounds.decode(&bounds.encode(&ranges, 0.1));
    Ok(HfParams {
        beta_rho,
        beta_h,
        sigma2_h,
        theta_h: LengthScales::new(theta)?,
        eta_h: eta,
    })
}

/// Runs EM for the HF parameters with the LF model held fixed.
#[allow(clippy::too_many_arguments)]
pub fn em_fit_hf(
    data: &MfData,
    lf_model: &TrainedGp,
    hf_basis: &BasisSpec,
    rho_basis: &BasisSpec,
    bounds: &HyperBounds,
    config: &MultiStartConfig,
    em_config: &EmConfig,
) -> Result<(HfParams, EmLog)> {
    let hf = &data.hf;
    let q = rho_basis.len();
    if hf.len() < q + hf_basis.len() + 1 {
        return Err(Error::InvalidConfig(format!(
            "need at least {} HF points, got {}",
            q + hf_basis.len() + 1,
            hf.len()
        )));
    }
    if bounds.dim() != hf.dim() {
        return Err(Error::DimensionMismatch(format!(
            "bounds cover {} dimensions, HF data has {}",
            bounds.dim(),
            hf.dim()
        )));
    }
    let moments = LfMomentsAtHf::compute(lf_model, &hf.x)?;
    let g = rho_basis.design_matrix(&hf.x)?;
    let f_h = hf_basis.design_matrix(&hf.x)?;
    let log_box = bounds.log_box()?;

    let mut params = initial_params(&moments, hf, &g, &f_h, bounds)?;
    let mut loglik = observed_loglik_from_moments(&moments, hf, &g, &f_h, &params)?;
    let mut log = EmLog {
        loglik: vec![loglik],
        iterates: vec![params.clone()],
        converged: false,
    };

    for iteration in 0..em_config.max_em_iterations {
        let state = e_step_from_moments(&moments, hf, &g, &f_h, &params)?;
        let objective = |u: &[f64]| {
            let (theta, eta) = bounds.decode(u);
            let Ok(ls) = LengthScales::new(theta.clone()) else {
                return (f64::INFINITY, vec![0.0; u.len()]);
            };
            match q_tilde_and_grad(&state, hf, &ls, eta) {
                Ok((v, grad)) => (v, bounds.chain_rule(&theta, eta, grad.as_slice())),
                Err(_) => (f64::INFINITY, vec![0.0; u.len()]),
            }
        };
        let inner = MultiStartConfig {
            n_starts: if iteration == 0 {
                config.n_starts
            } else {
                em_config.inner_starts.max(1)
            },
            rng_seed: derive_seed(config.rng_seed, 1 + iteration as u64),
            ..config.clone()
        };
        // The current iterate is always a start, so the auxiliary function
        // cannot decrease (generalized EM).
        let warm = bounds.encode(params.theta_h.as_slice(), params.eta_h);
        let result = multi_start_minimize_with(objective, &log_box, &inner, &[warm])?;
        let (theta, eta) = bounds.decode(&result.best.x);
        let theta_h = LengthScales::new(theta)?;
        let (beta, sigma2_h) = m_step_closed_forms(&state, hf, &theta_h, eta)?;
        let next = HfParams {
            beta_rho: beta.rows(0, q).into_owned(),
            beta_h: beta.rows(q, beta.len() - q).into_owned(),
            sigma2_h,
            theta_h,
            eta_h: eta,
        };
        let next_loglik = observed_loglik_from_moments(&moments, hf, &g, &f_h, &next)?;
        if next_loglik < loglik - NON_MONOTONE_TOLERANCE {
            return Err(Error::NonMonotoneEM {
                iteration: iteration + 1,
                previous: loglik,
                current: next_loglik,
            });
        }
        let rel_change = (next_loglik - loglik).abs() / loglik.abs().max(1.0);
        params = next;
        loglik = next_loglik;
        log.loglik.push(loglik);
        log.iterates.push(params.clone());
        if rel_change < em_config.loglik_rel_tolerance {
            log.converged = true;
            break;
        }
    }
    Ok((params, log))
}
