//! Shared fixtures for the criterion benchmarks.

use mfkrig::design::{add_noise, eval_testfn, lhs, maximin_lhs};
use mfkrig::{Dataset, Fidelity, MfData, MultiStartConfig, TestFunction};
use nalgebra::DMatrix;

fn sample(pair: TestFunction, level: Fidelity, x: DMatrix<f64>, noise_sd: f64, seed: u64) -> Dataset {
    let y = eval_testfn(pair, level, &x).expect("test function");
    let z = add_noise(&y, noise_sd * noise_sd, seed).expect("noise");
    Dataset::new(x, z).expect("dataset")
}

/// The 1D analytic pair on [0, 2] with plain LHS designs.
pub fn analytic_data(n_lf: usize, n_hf: usize, noise_sd_hf: f64, seed: u64) -> MfData {
    let pair = TestFunction::Analytic1d;
    let lf_x = lhs(n_lf, 1, seed).scaled(&[0.0], &[2.0]);
    let hf_x = lhs(n_hf, 1, seed + 1).scaled(&[0.0], &[2.0]);
    MfData::new(
        sample(pair, Fidelity::Low, lf_x, 0.0, seed + 2),
        sample(pair, Fidelity::High, hf_x, noise_sd_hf, seed + 3),
    )
    .expect("matching dimensions")
}

/// The 4D Park pair with maximin designs on the unit cube.
pub fn park_data(n_lf: usize, n_hf: usize, noise_sd: f64, seed: u64) -> MfData {
    let pair = TestFunction::Park4d;
    let (lo, hi) = pair.domain();
    let lf_x = maximin_lhs(n_lf, 4, 10, seed).scaled(&lo, &hi);
    let hf_x = maximin_lhs(n_hf, 4, 10, seed + 1).scaled(&lo, &hi);
    MfData::new(
        sample(pair, Fidelity::Low, lf_x, noise_sd, seed + 2),
        sample(pair, Fidelity::High, hf_x, noise_sd, seed + 3),
    )
    .expect("matching dimensions")
}

pub fn optimizer(n_starts: usize) -> MultiStartConfig {
    MultiStartConfig {
        n_starts,
        ..MultiStartConfig::default()
    }
}
