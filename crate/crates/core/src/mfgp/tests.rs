use super::*;
use crate::gp::{EtaBounds, GpHyper};
use crate::kernels::KernelParams;
use crate::numerics::track_peak_factorization;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_points(r: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| r.random::<f64>())
}

fn smooth(x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(k, v)| (3.0 * v + k as f64).sin())
        .sum::<f64>()
        + 0.5 * x[0] * x[0]
}

fn noisy_dataset(r: &mut ChaCha8Rng, x: DMatrix<f64>, f: impl Fn(&[f64]) -> f64, sd: f64) -> Dataset {
    let z = DVector::from_fn(x.nrows(), |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let e: f64 = StandardNormal.sample(r);
        f(&row) + sd * e
    });
    Dataset::new(x, z).unwrap()
}

fn random_dataset(r: &mut ChaCha8Rng, n: usize, d: usize, f: impl Fn(&[f64]) -> f64, sd: f64) -> Dataset {
    let x = uniform_points(r, n, d);
    noisy_dataset(r, x, f, sd)
}

fn lf_model_with(data: Dataset, theta: f64, sigma2: f64, eta: f64) -> TrainedGp {
    let d = data.dim();
    let hyper = GpHyper {
        beta: DVector::from_element(1, 0.2),
        kernel: KernelParams::new(LengthScales::new(vec![theta; d]).unwrap(), sigma2, eta).unwrap(),
    };
    TrainedGp::from_hyper(data, BasisSpec::constant(), hyper, Default::default()).unwrap()
}

/// A random LF model plus HF data at non-nested inputs.
fn random_instance(seed: u64, n_l: usize, n_h: usize, d: usize) -> (MfData, TrainedGp) {
    let mut r = rng(seed);
    let lf = random_dataset(&mut r, n_l, d, smooth, 0.1);
    let hf = random_dataset(&mut r, n_h, d, |x| 1.3 * smooth(x) + x[0], 0.1);
    let theta = r.random_range(0.3..0.8);
    let lf_model = lf_model_with(lf.clone(), theta, r.random_range(0.5..2.0), r.random_range(0.005..0.05));
    (MfData::new(lf, hf).unwrap(), lf_model)
}

fn random_params(r: &mut ChaCha8Rng, hf_basis: &BasisSpec, rho_basis: &BasisSpec, d: usize) -> HfParams {
    HfParams {
        beta_rho: DVector::from_fn(rho_basis.len(), |i, _| {
            if i == 0 {
                r.random_range(0.8..1.5)
            } else {
                r.random_range(-0.3..0.3)
            }
        }),
        beta_h: DVector::from_fn(hf_basis.len(), |_, _| r.random_range(-0.5..0.5)),
        sigma2_h: r.random_range(0.2..2.0),
        theta_h: LengthScales::new((0..d).map(|_| r.random_range(0.2..1.0)).collect()).unwrap(),
        eta_h: r.random_range(0.01..0.3),
    }
}

fn dense_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

#[test]
fn lf_moments_interpolate_noise_free_training_points() {
    let mut r = rng(1);
    let lf = random_dataset(&mut r, 12, 1, smooth, 0.0);
    let model = lf_model_with(lf.clone(), 0.3, 1.0, 0.0);
    let x = lf.x.rows(2, 4).into_owned();
    let (mean, cov) = lf_posterior_moments(&model, &x).unwrap();
    for i in 0..4 {
        assert!((mean[i] - lf.z[2 + i]).abs() < 1e-8);
    }
    assert!(cov.abs().max() < 1e-8);
}

#[test]
fn lf_moments_revert_to_prior_far_away() {
    let mut r = rng(2);
    let lf = random_dataset(&mut r, 10, 2, smooth, 0.05);
    let model = lf_model_with(lf, 0.2, 1.7, 0.01);
    let x = DMatrix::from_row_slice(3, 2, &[50.0, 50.0, 50.1, 50.0, 50.0, 50.3]);
    let (mean, cov) = lf_posterior_moments(&model, &x).unwrap();
    let prior = corr_matrix_sym(&x, &LengthScales::new(vec![0.2, 0.2]).unwrap()).unwrap() * 1.7;
    assert!(mean.iter().all(|m| (m - 0.2).abs() < 1e-12));
    assert!(max_abs_diff(&cov, &prior) < 1e-12);
}

#[test]
fn lf_moments_covariance_is_psd() {
    let (data, model) = random_instance(3, 15, 6, 2);
    let mut r = rng(33);
    let x = uniform_points(&mut r, 6, 2);
    let (_, cov) = lf_posterior_moments(&model, &x).unwrap();
    assert!(max_abs_diff(&cov, &cov.transpose()) < 1e-12);
    assert!(cov.symmetric_eigen().eigenvalues.min() > -1e-10);
    drop(data);
}

fn fitted_model_from(
    data: &MfData,
    lf: TrainedGp,
    params: HfParams,
    hf_basis: BasisSpec,
    rho_basis: BasisSpec,
) -> MfModel {
    MfModel::from_parts(lf, data.hf.clone(), params, hf_basis, rho_basis, EmLog::default()).unwrap()
}

#[test]
fn ar_moments_with_zero_scaling() {
    let (data, lf) = random_instance(4, 14, 7, 2);
    let mut r = rng(44);
    let mut params = random_params(&mut r, &BasisSpec::constant(), &BasisSpec::constant(), 2);
    params.beta_rho[0] = 0.0;
    let model = fitted_model_from(&data, lf, params.clone(), BasisSpec::constant(), BasisSpec::constant());
    let xs = uniform_points(&mut r, 5, 2);
    let (m_ar, k_cross, k_ar) = model.ar_moments(&xs).unwrap();
    assert!(m_ar.iter().all(|m| (m - params.beta_h[0]).abs() < 1e-14));
    let r_h = corr_matrix_sym(&data.hf.x, &params.theta_h).unwrap() * params.sigma2_h;
    assert!(max_abs_diff(&k_ar, &r_h) < 1e-14);
    let r_x = corr_matrix(&xs, &data.hf.x, &params.theta_h).unwrap() * params.sigma2_h;
    assert!(max_abs_diff(&k_cross, &r_x) < 1e-14);
}

#[test]
fn ar_moments_nested_noise_free_simplify() {
    let mut r = rng(5);
    let lf = random_dataset(&mut r, 12, 1, smooth, 0.0);
    let hf_x = lf.x.rows(0, 5).into_owned();
    let hf = noisy_dataset(&mut r, hf_x, |x| 2.0 * smooth(x), 0.0);
    let data = MfData::new(lf.clone(), hf).unwrap();
    let lf_model = lf_model_with(lf, 0.25, 1.0, 0.0);
    let params = HfParams {
        beta_rho: DVector::from_element(1, 2.0),
        beta_h: DVector::from_element(1, 0.1),
        sigma2_h: 0.7,
        theta_h: LengthScales::new(vec![0.4]).unwrap(),
        eta_h: 0.05,
    };
    let model = fitted_model_from(
        &data,
        lf_model,
        params.clone(),
        BasisSpec::constant(),
        BasisSpec::constant(),
    );
    let (_, k_cross, k_ar) = model.ar_moments(&data.hf.x).unwrap();
    let expected = corr_matrix_sym(&data.hf.x, &params.theta_h).unwrap() * 0.7;
    assert!(max_abs_diff(&k_ar, &expected) < 1e-8);
    assert!(max_abs_diff(&k_cross, &expected) < 1e-8);
}

#[test]
fn ar_moments_match_elementwise_assembly() {
    let rho_basis = BasisSpec::linear(2);
    let hf_basis = BasisSpec::linear(2);
    let (data, lf) = random_instance(6, 16, 8, 2);
    let mut r = rng(66);
    let params = random_params(&mut r, &hf_basis, &rho_basis, 2);
    let model = fitted_model_from(&data, lf.clone(), params.clone(), hf_basis, rho_basis);
    let xs = uniform_points(&mut r, 4, 2);
    let (m_ar, k_cross, k_ar) = model.ar_moments(&xs).unwrap();
    let rho = |x: &[f64]| params.beta_rho[0] + params.beta_rho[1] * x[0] + params.beta_rho[2] * x[1];
    let fh = |x: &[f64]| params.beta_h[0] + params.beta_h[1] * x[0] + params.beta_h[2] * x[1];
    let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
    let (ml_s, _) = lf_posterior_moments(&lf, &xs).unwrap();
    let v_sh = lf.posterior_cross_cov(&xs, &data.hf.x).unwrap();
    let v_hh = lf.posterior_cross_cov(&data.hf.x, &data.hf.x).unwrap();
    for i in 0..4 {
        let xi = row(&xs, i);
        assert!((m_ar[i] - (rho(&xi) * ml_s[i] + fh(&xi))).abs() < 1e-12);
        for j in 0..8 {
            let xj = row(&data.hf.x, j);
            let r_ij = crate::kernels::gauss_corr(&xi, &xj, &params.theta_h).unwrap();
            let want = rho(&xi) * rho(&xj) * v_sh[(i, j)] + params.sigma2_h * r_ij;
            assert!((k_cross[(i, j)] - want).abs() < 1e-12);
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            let (xi, xj) = (row(&data.hf.x, i), row(&data.hf.x, j));
            let r_ij = crate::kernels::gauss_corr(&xi, &xj, &params.theta_h).unwrap();
            let want = rho(&xi) * rho(&xj) * v_hh[(i, j)] + params.sigma2_h * r_ij;
            assert!((k_ar[(i, j)] - want).abs() < 1e-12);
        }
    }
    assert!(max_abs_diff(&k_ar, &k_ar.transpose()) < 1e-14);
}

#[test]
fn e_step_with_zero_scaling_is_independent() {
    let (data, lf) = random_instance(7, 14, 6, 1);
    let mut r = rng(77);
    let mut params = random_params(&mut r, &BasisSpec::constant(), &BasisSpec::constant(), 1);
    params.beta_rho[0] = 0.0;
    let s = e_step(&data, &lf, &params, &BasisSpec::constant(), &BasisSpec::constant()).unwrap();
    assert!(s.sigma_yz.abs().max() == 0.0);
    assert!((&s.mu_y_given_z - &s.lf_mean_at_hf).abs().max() == 0.0);
    assert!(max_abs_diff(&s.sigma_y_given_z, &s.lf_cov_at_hf) == 0.0);
}

#[test]
fn e_step_nested_noise_free_recovers_lf_observations() {
    let mut r = rng(8);
    let lf = random_dataset(&mut r, 15, 2, smooth, 0.0);
    let hf_x = lf.x.rows(3, 6).into_owned();
    let hf = noisy_dataset(&mut r, hf_x, |x| 1.5 * smooth(x) - x[1], 0.05);
    let data = MfData::new(lf.clone(), hf).unwrap();
    let lf_model = lf_model_with(lf.clone(), 0.4, 1.0, 0.0);
    let params = random_params(&mut r, &BasisSpec::constant(), &BasisSpec::constant(), 2);
    let s = e_step(
        &data,
        &lf_model,
        &params,
        &BasisSpec::constant(),
        &BasisSpec::constant(),
    )
    .unwrap();
    assert!(s.sigma_y_given_z.abs().max() < 1e-8);
    for i in 0..6 {
        assert!((s.mu_y_given_z[i] - lf.z[3 + i]).abs() < 1e-8);
        assert!((s.lf_mean_at_hf[i] - lf.z[3 + i]).abs() < 1e-8);
    }
}

#[test]
fn e_step_matches_joint_gaussian_conditioning() {
    let rho_basis = BasisSpec::linear(2);
    let hf_basis = BasisSpec::constant();
    for seed in 0..5 {
        let (data, lf) = random_instance(100 + seed, 18, 7, 2);
        let mut r = rng(200 + seed);
        let p = random_params(&mut r, &hf_basis, &rho_basis, 2);
        let s = e_step(&data, &lf, &p, &hf_basis, &rho_basis).unwrap();

        // Joint law of (Y, Z) with Y = Y_L~(X_H) and Z = rho ⊙ Y + F beta_H + delta.
        let n = 7;
        let (m, v) = lf_posterior_moments(&lf, &data.hf.x).unwrap();
        let rho: Vec<f64> = (0..n)
            .map(|i| p.beta_rho[0] + p.beta_rho[1] * data.hf.x[(i, 0)] + p.beta_rho[2] * data.hf.x[(i, 1)])
            .collect();
        let r_h = corr_matrix_sym(&data.hf.x, &p.theta_h).unwrap();
        let mut joint = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                joint[(i, j)] = v[(i, j)];
                joint[(i, n + j)] = v[(i, j)] * rho[j];
                joint[(n + i, j)] = rho[i] * v[(i, j)];
                joint[(n + i, n + j)] =
                    rho[i] * rho[j] * v[(i, j)] + p.sigma2_h * (r_h[(i, j)] + if i == j { p.eta_h } else { 0.0 });
            }
        }
        let mean_z = DVector::from_fn(n, |i, _| rho[i] * m[i] + p.beta_h[0]);
        let c_yz = joint.view((0, n), (n, n)).into_owned();
        let c_zz_inv = dense_inverse(&joint.view((n, n), (n, n)).into_owned());
        let mu = &m + &c_yz * &c_zz_inv * (&data.hf.z - mean_z);
        let sig = &v - &c_yz * &c_zz_inv * c_yz.transpose();

        assert!((&s.mu_y_given_z - mu).abs().max() < 1e-8);
        assert!(max_abs_diff(&s.sigma_y_given_z, &sig) < 1e-8);
        assert!(max_abs_diff(&s.sigma_yz, &c_yz) < 1e-12);
        assert!(s.sigma_y_given_z.clone().symmetric_eigen().eigenvalues.min() > -1e-8);
        for i in 0..n {
            for k in 0..3 {
                assert!((s.h_matrix[(i, k)] - s.g_matrix[(i, k)] * s.mu_y_given_z[i]).abs() < 1e-15);
            }
            assert_eq!(s.h_matrix[(i, 3)], 1.0);
        }
    }
}

/// A state with no latent uncertainty and a chosen design matrix.
fn certain_state(h: DMatrix<f64>, q: usize) -> EStepState {
    let n = h.nrows();
    let g = h.columns(0, q).into_owned();
    EStepState {
        sigma_yz: DMatrix::zeros(n, n),
        sigma_zz: DMatrix::identity(n, n),
        mu_y_given_z: DVector::from_element(n, 1.0),
        sigma_y_given_z: DMatrix::zeros(n, n),
        h_matrix: h,
        g_matrix: g,
        lf_mean_at_hf: DVector::from_element(n, 1.0),
        lf_cov_at_hf: DMatrix::zeros(n, n),
    }
}

#[test]
fn m_step_without_latent_uncertainty_is_gls() {
    let mut r = rng(9);
    let n = 10;
    let x = uniform_points(&mut r, n, 2);
    let h = DMatrix::from_fn(n, 3, |i, j| {
        if j == 2 {
            1.0
        } else {
            (x[(i, 0)] * (j + 1) as f64).cos() + x[(i, 1)]
        }
    });
    let z = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
    let hf = Dataset::new(x.clone(), z.clone()).unwrap();
    let theta = LengthScales::new(vec![0.5, 0.7]).unwrap();
    let eta = 0.1;
    let (beta, sigma2) = m_step_closed_forms(&certain_state(h.clone(), 2), &hf, &theta, eta).unwrap();

    let mut rt = corr_matrix_sym(&x, &theta).unwrap();
    rt += DMatrix::identity(n, n) * eta;
    let w = dense_inverse(&rt);
    let expected = dense_inverse(&(h.transpose() * &w * &h)) * h.transpose() * &w * &z;
    let resid = &z - &h * &expected;
    let s2 = resid.dot(&(&w * &resid)) / n as f64;
    for k in 0..3 {
        assert!((beta[k] - expected[k]).abs() < 1e-10 * expected[k].abs().max(1.0));
    }
    assert!(rel_close(sigma2, s2, 1e-10));
}

#[test]
fn m_step_exact_fit_has_zero_variance() {
    let mut r = rng(10);
    let n = 8;
    let x = uniform_points(&mut r, n, 1);
    let h = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 + x[(i, 0)] } else { 1.0 });
    let c = DVector::from_vec(vec![1.7, -0.4]);
    let hf = Dataset::new(x, &h * &c).unwrap();
    let theta = LengthScales::new(vec![0.3]).unwrap();
    let (beta, sigma2) = m_step_closed_forms(&certain_state(h, 1), &hf, &theta, 0.2).unwrap();
    assert!((beta[0] - 1.7).abs() < 1e-10 && (beta[1] + 0.4).abs() < 1e-10);
    assert!(sigma2.abs() < 1e-20);
}

#[test]
fn m_step_coefficients_are_stationary_for_q_prime() {
    let rho_basis = BasisSpec::linear(2);
    let hf_basis = BasisSpec::constant();
    for seed in 0..4 {
        let (data, lf) = random_instance(300 + seed, 16, 9, 2);
        let mut r = rng(400 + seed);
        let p = random_params(&mut r, &hf_basis, &rho_basis, 2);
        let s = e_step(&data, &lf, &p, &hf_basis, &rho_basis).unwrap();
        let theta = LengthScales::new(vec![0.6, 0.4]).unwrap();
        let eta = 0.07;
        let (beta, sigma2) = m_step_closed_forms(&s, &data.hf, &theta, eta).unwrap();

        // Analytic gradient in beta assembled from dense inverses.
        let n = data.hf.len();
        let mut rt = corr_matrix_sym(&data.hf.x, &theta).unwrap();
        rt += DMatrix::identity(n, n) * eta;
        let w = dense_inverse(&rt);
        let mut t = DMatrix::zeros(4, 4);
        t.view_mut((0, 0), (3, 3))
            .copy_from(&(s.g_matrix.transpose() * w.component_mul(&s.sigma_y_given_z) * &s.g_matrix));
        let resid = &data.hf.z - &s.h_matrix * &beta;
        let grad = (s.h_matrix.transpose() * &w * resid - &t * &beta) / sigma2;
        assert!(grad.norm() < 1e-8, "gradient norm {}", grad.norm());

        // Central differences agree as well.
        let base = q_prime(&s, &data.hf, &beta, sigma2, &theta, eta).unwrap();
        for k in 0..beta.len() {
            let h = 1e-5 * beta[k].abs().max(1.0);
            let mut bp = beta.clone();
            bp[k] += h;
            let mut bm = beta.clone();
            bm[k] -= h;
            let fd = (q_prime(&s, &data.hf, &bp, sigma2, &theta, eta).unwrap()
                - q_prime(&s, &data.hf, &bm, sigma2, &theta, eta).unwrap())
                / (2.0 * h);
            assert!(fd.abs() < 1e-5 * base.abs().max(1.0), "fd {fd}");
        }
        // And sigma2 maximizes Q' for that beta.
        let up = q_prime(&s, &data.hf, &beta, sigma2 * 1.001, &theta, eta).unwrap();
        let down = q_prime(&s, &data.hf, &beta, sigma2 * 0.999, &theta, eta).unwrap();
        assert!(base > up && base > down);
    }
}

/// `-Q~'` by full re-profiling, for finite differences.
fn neg_q_tilde(s: &EStepState, hf: &Dataset, theta: &[f64], eta: f64) -> f64 {
    let ls = LengthScales::new(theta.to_vec()).unwrap();
    let (beta, sigma2) = m_step_closed_forms(s, hf, &ls, eta).unwrap();
    -q_prime(s, hf, &beta, sigma2, &ls, eta).unwrap()
}

fn check_q_tilde_gradient(s: &EStepState, hf: &Dataset, theta: &[f64], eta: f64) {
    let ls = LengthScales::new(theta.to_vec()).unwrap();
    let (value, grad) = q_tilde_and_grad(s, hf, &ls, eta).unwrap();
    assert!(rel_close(value, neg_q_tilde(s, hf, theta, eta), 1e-10));
    let mut point = theta.to_vec();
    point.push(eta);
    for k in 0..point.len() {
        let h = 1e-6 * point[k];
        let eval = |delta: f64| {
            let mut q = point.clone();
            q[k] += delta;
            neg_q_tilde(s, hf, &q[..theta.len()], q[theta.len()])
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let err = (grad[k] - fd).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
        assert!(err < 1e-4, "component {k}: analytic {} vs fd {fd}", grad[k]);
    }
}

#[test]
fn q_tilde_gradient_matches_finite_differences() {
    let rho_basis = BasisSpec::linear(2);
    let hf_basis = BasisSpec::linear(2);
    for seed in 0..20 {
        let (data, lf) = random_instance(500 + seed, 14, 9, 2);
        let mut r = rng(600 + seed);
        let p = random_params(&mut r, &hf_basis, &rho_basis, 2);
        let s = e_step(&data, &lf, &p, &hf_basis, &rho_basis).unwrap();
        let theta = [r.random_range(0.2..1.5), r.random_range(0.2..1.5)];
        check_q_tilde_gradient(&s, &data.hf, &theta, r.random_range(0.01..1.0));
    }
}

#[test]
fn q_tilde_without_latent_uncertainty_reduces_to_single_fidelity() {
    let mut r = rng(11);
    let n = 9;
    let x = uniform_points(&mut r, n, 2);
    let h = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 2.0 + x[(i, 0)].sin() } else { 1.0 });
    let z = DVector::from_fn(n, |i, _| h[(i, 0)] * 1.2 + 0.3 + 0.2 * (5.0 * x[(i, 1)]).sin());
    let hf = Dataset::new(x.clone(), z.clone()).unwrap();
    let theta = LengthScales::new(vec![0.4, 0.6]).unwrap();
    let eta = 0.05;
    let (value, grad) = q_tilde_and_grad(&certain_state(h.clone(), 1), &hf, &theta, eta).unwrap();

    // Single-fidelity kappa-form gradient from dense algebra.
    let mut rt = corr_matrix_sym(&x, &theta).unwrap();
    rt += DMatrix::identity(n, n) * eta;
    let w = dense_inverse(&rt);
    let beta = dense_inverse(&(h.transpose() * &w * &h)) * h.transpose() * &w * &z;
    let resid = &z - &h * &beta;
    let sigma2 = resid.dot(&(&w * &resid)) / n as f64;
    let kappa = &w * &resid / sigma2.sqrt();
    let nf = n as f64;
    let logdet = rt.clone().lu().determinant().ln();
    let expected = 0.5 * nf * sigma2.ln() + 0.5 * logdet + 0.5 * nf * (1.0 + (2.0 * std::f64::consts::PI).ln());
    assert!(rel_close(value, expected, 1e-10));
    for d in 0..2 {
        let dr = crate::kernels::corr_matrix_grad(&x, &theta, d).unwrap();
        let g = -0.5 * ((kappa.transpose() * &dr * &kappa)[0] - (&w * &dr).trace());
        assert!(rel_close(grad[d], g, 1e-8));
    }
    let g_eta = -0.5 * (kappa.norm_squared() - w.trace());
    assert!(rel_close(grad[2], g_eta, 1e-8));
}

#[test]
fn q_tilde_is_invariant_to_relabeling() {
    let (data, lf) = random_instance(12, 15, 8, 2);
    let mut r = rng(1212);
    let p = random_params(&mut r, &BasisSpec::constant(), &BasisSpec::constant(), 2);
    let theta = LengthScales::new(vec![0.5, 0.8]).unwrap();
    let s = e_step(&data, &lf, &p, &BasisSpec::constant(), &BasisSpec::constant()).unwrap();
    let (v, _) = q_tilde_and_grad(&s, &data.hf, &theta, 0.1).unwrap();

    let perm = [3, 0, 7, 5, 1, 6, 2, 4];
    let x = DMatrix::from_fn(8, 2, |i, j| data.hf.x[(perm[i], j)]);
    let z = DVector::from_fn(8, |i, _| data.hf.z[perm[i]]);
    let permuted = MfData::new(data.lf.clone(), Dataset::new(x, z).unwrap()).unwrap();
    let s2 = e_step(&permuted, &lf, &p, &BasisSpec::constant(), &BasisSpec::constant()).unwrap();
    let (v2, _) = q_tilde_and_grad(&s2, &permuted.hf, &theta, 0.1).unwrap();
    assert!(rel_close(v, v2, 1e-11));
}

#[test]
fn observed_loglik_scalar_case() {
    let mut r = rng(13);
    let lf = random_dataset(&mut r, 6, 1, smooth, 0.05);
    let lf_model = lf_model_with(lf.clone(), 0.3, 1.2, 0.02);
    let hf = Dataset::new(DMatrix::from_element(1, 1, 0.37), DVector::from_element(1, 0.9)).unwrap();
    let data = MfData::new(lf, hf.clone()).unwrap();
    let p = HfParams {
        beta_rho: DVector::from_element(1, 1.4),
        beta_h: DVector::from_element(1, -0.2),
        sigma2_h: 0.3,
        theta_h: LengthScales::new(vec![0.5]).unwrap(),
        eta_h: 0.2,
    };
    let ll = hf_observed_loglik(&data, &lf_model, &p, &BasisSpec::constant(), &BasisSpec::constant()).unwrap();
    let (m, v) = lf_posterior_moments(&lf_model, &hf.x).unwrap();
    let mean = 1.4 * m[0] - 0.2;
    let var = 1.4 * 1.4 * v[(0, 0)] + 0.3 * 1.2;
    let expected = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (0.9 - mean).powi(2) / var);
    assert!((ll - expected).abs() < 1e-12);
}

#[test]
fn observed_loglik_matches_dense_density() {
    let rho_basis = BasisSpec::linear(2);
    let hf_basis = BasisSpec::linear(2);
    for seed in 0..6 {
        let n_h = 3 + seed as usize;
        let (data, lf) = random_instance(700 + seed, 12, n_h, 2);
        let mut r = rng(800 + seed);
        let p = random_params(&mut r, &hf_basis, &rho_basis, 2);
        let ll = hf_observed_loglik(&data, &lf, &p, &hf_basis, &rho_basis).unwrap();

        let (m, v) = lf_posterior_moments(&lf, &data.hf.x).unwrap();
        let x = &data.hf.x;
        let rho = DVector::from_fn(n_h, |i, _| {
            p.beta_rho[0] + p.beta_rho[1] * x[(i, 0)] + p.beta_rho[2] * x[(i, 1)]
        });
        let mean = DVector::from_fn(n_h, |i, _| {
            rho[i] * m[i] + p.beta_h[0] + p.beta_h[1] * x[(i, 0)] + p.beta_h[2] * x[(i, 1)]
        });
        let r_h = corr_matrix_sym(x, &p.theta_h).unwrap();
        let cov = DMatrix::from_fn(n_h, n_h, |i, j| {
            rho[i] * rho[j] * v[(i, j)] + p.sigma2_h * r_h[(i, j)] + if i == j { p.noise_variance() } else { 0.0 }
        });
        let d = &data.hf.z - mean;
        let expected = -0.5
            * (d.dot(&(dense_inverse(&cov) * &d))
                + cov.clone().lu().determinant().ln()
                + n_h as f64 * (2.0 * std::f64::consts::PI).ln());
        assert!((ll - expected).abs() < 1e-8, "{ll} vs {expected}");
    }
}

fn small_config(seed: u64) -> MultiStartConfig {
    MultiStartConfig {
        n_starts: 4,
        rng_seed: seed,
        ..MultiStartConfig::default()
    }
}

#[test]
fn em_trace_is_monotone_and_matches_iterates() {
    for seed in 0..3 {
        let (data, lf) = random_instance(900 + seed, 20, 10, 2);
        let bounds = HyperBounds::default_for(&data.hf.x);
        let (params, log) = em_fit_hf(
            &data,
            &lf,
            &BasisSpec::constant(),
            &BasisSpec::constant(),
            &bounds,
            &small_config(seed),
            &EmConfig::default(),
        )
        .unwrap();
        assert_eq!(log.loglik.len(), log.iterates.len());
        assert_eq!(log.iterates.last().unwrap(), &params);
        for w in log.loglik.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        for (ll, it) in log.loglik.iter().zip(&log.iterates) {
            let again = hf_observed_loglik(&data, &lf, it, &BasisSpec::constant(), &BasisSpec::constant()).unwrap();
            assert_eq!(*ll, again);
        }
    }
}

#[test]
fn em_is_deterministic() {
    let (data, lf) = random_instance(14, 15, 8, 1);
    let bounds = HyperBounds::default_for(&data.hf.x);
    let run = || {
        em_fit_hf(
            &data,
            &lf,
            &BasisSpec::constant(),
            &BasisSpec::constant(),
            &bounds,
            &small_config(3),
            &EmConfig::default(),
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn em_rejects_too_few_hf_points() {
    let (data, lf) = random_instance(15, 10, 2, 1);
    let bounds = HyperBounds::default_for(&data.hf.x);
    let err = em_fit_hf(
        &data,
        &lf,
        &BasisSpec::constant(),
        &BasisSpec::constant(),
        &bounds,
        &small_config(0),
        &EmConfig::default(),
    );
    assert!(matches!(err, Err(Error::InvalidConfig(_))));
}

/// Negative profiled log-likelihood of `z_H ~ N(rho z_L + F beta, s2 (R + eta I))`
/// assembled with dense algebra.
fn simplified_nll(x: &DMatrix<f64>, z: &DVector<f64>, h: &DMatrix<f64>, theta: &[f64], eta: f64) -> f64 {
    let n = z.len();
    let ls = LengthScales::new(theta.to_vec()).unwrap();
    let mut rt = corr_matrix_sym(x, &ls).unwrap();
    rt += DMatrix::identity(n, n) * eta;
    let w = dense_inverse(&rt);
    let beta = dense_inverse(&(h.transpose() * &w * h)) * h.transpose() * &w * z;
    let resid = z - h * beta;
    let s2 = resid.dot(&(&w * &resid)) / n as f64;
    0.5 * n as f64 * s2.ln() + 0.5 * rt.lu().determinant().ln()
}

#[test]
fn nested_noise_free_em_matches_direct_mle() {
    use crate::optimize::multi_start_minimize;
    let mut r = rng(16);
    let lf_x = DMatrix::from_fn(14, 1, |i, _| ((i * 5) % 14) as f64 / 13.0);
    let rough = |x: &[f64]| (14.0 * x[0]).sin() + x[0];
    let lf = noisy_dataset(&mut r, lf_x.clone(), rough, 0.0);
    let hf_x = lf_x.rows(0, 9).into_owned();
    let hf = noisy_dataset(&mut r, hf_x.clone(), |x| 1.7 * rough(x) + (6.0 * x[0]).cos(), 0.05);
    let data = MfData::new(lf.clone(), hf.clone()).unwrap();
    let cfg = MultiStartConfig {
        n_starts: 6,
        rng_seed: 5,
        gradient_tolerance: 1e-9,
        max_iterations: 500,
    };
    let lf_bounds = HyperBounds::default_for(&lf.x).with_eta(EtaBounds::Fixed(0.0));
    let lf_model = fit_gp(&lf, &BasisSpec::constant(), &lf_bounds, &cfg).unwrap();
    let hf_bounds = HyperBounds::default_for(&hf.x);
    let (params, log) = em_fit_hf(
        &data,
        &lf_model,
        &BasisSpec::constant(),
        &BasisSpec::constant(),
        &hf_bounds,
        &cfg,
        &EmConfig::default(),
    )
    .unwrap();

    // The EM objective is the simplified likelihood at every iterate.
    let z_l = DVector::from_fn(9, |i, _| lf.z[i]);
    for (ll, it) in log.loglik.iter().zip(&log.iterates) {
        let resid = &hf.z - &z_l * it.beta_rho[0] - DVector::from_element(9, it.beta_h[0]);
        let mut c = corr_matrix_sym(&hf_x, &it.theta_h).unwrap() * it.sigma2_h;
        c += DMatrix::identity(9, 9) * it.noise_variance();
        let direct = -0.5
            * (resid.dot(&(dense_inverse(&c) * &resid))
                + c.lu().determinant().ln()
                + 9.0 * (2.0 * std::f64::consts::PI).ln());
        assert!((ll - direct).abs() < 1e-8 * ll.abs().max(1.0));
    }

    let h = DMatrix::from_fn(9, 2, |i, j| if j == 0 { z_l[i] } else { 1.0 });
    let log_box = hf_bounds.log_box().unwrap();
    let objective = |u: &[f64]| {
        let f = |v: &[f64]| simplified_nll(&hf_x, &hf.z, &h, &[v[0].exp()], v[1].exp());
        let value = f(u);
        let grad = (0..2)
            .map(|k| {
                let mut a = u.to_vec();
                let mut b = u.to_vec();
                a[k] += 1e-6;
                b[k] -= 1e-6;
                (f(&a) - f(&b)) / 2e-6
            })
            .collect();
        (value, grad)
    };
    let best = multi_start_minimize(
        objective,
        &log_box,
        &MultiStartConfig {
            rng_seed: 99,
            gradient_tolerance: 1e-7,
            ..cfg
        },
    )
    .unwrap();
    let theta = best.best.x[0].exp();
    let eta = best.best.x[1].exp();
    assert!(
        rel_close(params.theta_h.as_slice()[0], theta, 1e-4),
        "{:?} vs {theta}",
        params.theta_h
    );
    assert!(rel_close(params.eta_h, eta, 1e-4), "{} vs {eta}", params.eta_h);
}

#[test]
fn fit_mf_keeps_lf_fit_separate() {
    let (data, _) = random_instance(17, 18, 8, 1);
    let config = MfConfig {
        optimizer: small_config(21),
        ..MfConfig::default()
    };
    let model = fit_mf(&data, &config).unwrap();
    let alone = fit_gp(
        &data.lf,
        &BasisSpec::constant(),
        &HyperBounds::default_for(&data.lf.x),
        &small_config(21),
    )
    .unwrap();
    assert_eq!(model.lf_model().hyper(), alone.hyper());
}

#[test]
fn fit_mf_never_factorizes_across_levels() {
    let (data, _) = random_instance(18, 16, 9, 2);
    let config = MfConfig {
        optimizer: small_config(1),
        ..MfConfig::default()
    };
    let (model, peak) = track_peak_factorization(|| fit_mf(&data, &config).unwrap());
    assert_eq!(peak, 16);
    drop(model);
}

#[test]
fn hf_prediction_interpolates_nested_noise_free_data() {
    let mut r = rng(19);
    let lf = random_dataset(&mut r, 12, 1, smooth, 0.0);
    let hf = noisy_dataset(&mut r, lf.x.rows(0, 6).into_owned(), |x| 2.0 * smooth(x) + x[0], 0.0);
    let data = MfData::new(lf.clone(), hf.clone()).unwrap();
    let lf_model = lf_model_with(lf, 0.3, 1.0, 0.0);
    let params = HfParams {
        beta_rho: DVector::from_element(1, 2.0),
        beta_h: DVector::from_element(1, 0.0),
        sigma2_h: 0.5,
        theta_h: LengthScales::new(vec![0.5]).unwrap(),
        eta_h: 0.0,
    };
    let model = fitted_model_from(&data, lf_model, params, BasisSpec::constant(), BasisSpec::constant());
    let pred = predict_mf(
        &model,
        &hf.x,
        Fidelity::High,
        PredictMode::Latent,
        CovarianceKind::Diagonal,
    )
    .unwrap();
    assert!((&pred.mean - &hf.z).abs().max() < 1e-6);
    assert!(pred.variances().max() < 1e-8);
}

#[test]
fn zero_scaling_decouples_from_lf() {
    let (data, lf) = random_instance(20, 14, 8, 2);
    let mut r = rng(2020);
    let mut params = random_params(&mut r, &BasisSpec::constant(), &BasisSpec::constant(), 2);
    params.beta_rho[0] = 0.0;
    let model = fitted_model_from(&data, lf, params.clone(), BasisSpec::constant(), BasisSpec::constant());
    let single = TrainedGp::from_hyper(
        data.hf.clone(),
        BasisSpec::constant(),
        GpHyper {
            beta: params.beta_h.clone(),
            kernel: KernelParams::new(params.theta_h.clone(), params.sigma2_h, params.eta_h).unwrap(),
        },
        Default::default(),
    )
    .unwrap();
    let xs = uniform_points(&mut r, 7, 2);
    for mode in [PredictMode::Latent, PredictMode::Noisy] {
        let a = predict_mf(&model, &xs, Fidelity::High, mode, CovarianceKind::Full).unwrap();
        let b = single.predict(&xs, mode, CovarianceKind::Full).unwrap();
        assert!((&a.mean - &b.mean).abs().max() < 1e-10);
        let (Covariance::Full(ca), Covariance::Full(cb)) = (&a.covariance, &b.covariance) else {
            unreachable!()
        };
        assert!(max_abs_diff(ca, cb) < 1e-10);
    }
}

#[test]
fn hf_full_covariance_is_psd_and_matches_diagonal() {
    let rho_basis = BasisSpec::linear(2);
    let (data, lf) = random_instance(21, 15, 8, 2);
    let mut r = rng(2121);
    let params = random_params(&mut r, &BasisSpec::constant(), &rho_basis, 2);
    let model = fitted_model_from(&data, lf, params, BasisSpec::constant(), rho_basis);
    let xs = uniform_points(&mut r, 6, 2);
    let full = predict_mf(&model, &xs, Fidelity::High, PredictMode::Latent, CovarianceKind::Full).unwrap();
    let diag = predict_mf(
        &model,
        &xs,
        Fidelity::High,
        PredictMode::Latent,
        CovarianceKind::Diagonal,
    )
    .unwrap();
    let Covariance::Full(c) = &full.covariance else {
        unreachable!()
    };
    assert!(max_abs_diff(c, &c.transpose()) < 1e-12);
    assert!(c.clone().symmetric_eigen().eigenvalues.min() > -1e-10);
    assert!((full.variances() - diag.variances()).abs().max() < 1e-10);
    assert_eq!(full.mean, diag.mean);

    let noisy = predict_mf(
        &model,
        &xs,
        Fidelity::High,
        PredictMode::Noisy,
        CovarianceKind::Diagonal,
    )
    .unwrap();
    let extra = model.hf_params().noise_variance();
    assert!((noisy.variances() - diag.variances())
        .iter()
        .all(|d| (d - extra).abs() < 1e-12));

    let lf_pred = predict_mf(
        &model,
        &xs,
        Fidelity::Low,
        PredictMode::Latent,
        CovarianceKind::Diagonal,
    )
    .unwrap();
    assert_eq!(
        lf_pred,
        model
            .lf_model()
            .predict(&xs, PredictMode::Latent, CovarianceKind::Diagonal)
            .unwrap()
    );
}

#[test]
fn prediction_rejects_wrong_dimension() {
    let (data, lf) = random_instance(22, 10, 5, 2);
    let mut r = rng(1);
    let params = random_params(&mut r, &BasisSpec::constant(), &BasisSpec::constant(), 2);
    let model = fitted_model_from(&data, lf, params, BasisSpec::constant(), BasisSpec::constant());
    let bad = DMatrix::zeros(3, 1);
    assert!(matches!(
        predict_mf(
            &model,
            &bad,
            Fidelity::High,
            PredictMode::Latent,
            CovarianceKind::Diagonal
        ),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn quadratic_form_expectation() {
    // E[Yᵀ A Y] = μᵀ A μ + tr(A Σ), checked by Monte Carlo within 3 standard errors.
    let mut r = rng(23);
    for _ in 0..10 {
        let n = r.random_range(1..=6);
        let mu = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let sigma = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
        let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let l = sigma.clone().cholesky().unwrap().l();
        let draws = 200_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let e = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
            let y = &mu + &l * e;
            let v = y.dot(&(&a * &y));
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        let exact = mu.dot(&(&a * &mu)) + (&a * &sigma).trace();
        assert!((mean - exact).abs() < 3.0 * se + 1e-12, "{mean} vs {exact} (se {se})");
    }
}

#[test]
fn diagonal_trace_identity() {
    // tr(Diag(x)ᵀ A Diag(y) Bᵀ) = xᵀ (A ⊙ B) y.
    let mut r = rng(24);
    for _ in 0..50 {
        let n = r.random_range(1..=8);
        let x = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-2.0..2.0));
        let b = DMatrix::from_fn(n, n, |_, _| r.random_range(-2.0..2.0));
        let lhs: f64 =
            (DMatrix::from_diagonal(&x).transpose() * &a * DMatrix::from_diagonal(&y) * b.transpose()).trace();
        let rhs = x.dot(&(a.component_mul(&b) * &y));
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
