//! Latin hypercube designs, the analytical benchmark functions and
//! Gaussian noise injection.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Fidelity;
use crate::error::{Error, Result};

pub const DEFAULT_MAXIMIN_RESTARTS: usize = 100;

/// Smallest `x1` used in the Park functions; the `x4 / x1²` term is singular at 0.
pub const PARK_X1_FLOOR: f64 = 1e-6;

/// Splitmix64 finalizer applied to `seed + stream`; used to derive
/// independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Points in the unit hypercube, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub points: DMatrix<f64>,
    pub seed: u64,
}

impl Design {
    /// Affinely maps every coordinate from `[0, 1]` to `[lower_d, upper_d]`.
    pub fn scaled(&self, lower: &[f64], upper: &[f64]) -> DMatrix<f64> {
        let mut x = self.points.clone();
        for (d, (l, u)) in lower.iter().zip(upper).enumerate() {
            x.column_mut(d).apply(|v| *v = l + (u - l) * *v);
        }
        x
    }

    pub fn min_distance(&self) -> f64 {
        min_pairwise_distance(&self.points)
    }
}

pub fn lhs(n: usize, d: usize, seed: u64) -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = DMatrix::zeros(n, d);
    let mut strata: Vec<usize> = (0..n).collect();
    for dim in 0..d {
        strata.shuffle(&mut rng);
        for (i, k) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            points[(i, dim)] = ((*k as f64 + u) / n as f64).min(1.0);
        }
    }
    Design { points, seed }
}

pub fn min_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let d = x.ncols();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let h = x[(i, k)] - x[(j, k)];
                s += h * h;
                if s >= best {
                    break;
                }
            }
            if s < best {
                best = s;
            }
        }
    }
    best.sqrt()
}

/// Best of `restarts` random LHS designs under the maximin criterion.
/// Candidate `i` is `lhs(n, d, derive_seed(seed, i))`.
pub fn maximin_lhs(n: usize, d: usize, restarts: usize, seed: u64) -> Design {
    let mut best: Option<(f64, Design)> = None;
    for i in 0..restarts.max(1) {
        let candidate = lhs(n, d, derive_seed(seed, i as u64));
        let dist = candidate.min_distance();
        if best.as_ref().is_none_or(|(b, _)| dist > *b) {
            best = Some((dist, candidate));
        }
    }
    best.map(|(_, design)| design).expect("at least one candidate")
}

/// The two analytical low/high-fidelity pairs used as benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunction {
    Analytic1d,
    Park4d,
}

impl TestFunction {
    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Analytic1d => "analytic1d",
            TestFunction::Park4d => "park4d",
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TestFunction::Analytic1d => 1,
            TestFunction::Park4d => 4,
        }
    }

    pub fn domain(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            TestFunction::Analytic1d => (vec![0.0], vec![2.0]),
            TestFunction::Park4d => (vec![0.0; 4], vec![1.0; 4]),
        }
    }

    pub fn eval_point(&self, level: Fidelity, x: &[f64]) -> f64 {
        match self {
            TestFunction::Analytic1d => {
                let t = x[0];
                let two_pi = 2.0 * std::f64::consts::PI;
                match level {
                    Fidelity::Low => (two_pi * t).sin(),
                    Fidelity::High => (t / 4.0 - std::f64::consts::SQRT_2) * (two_pi * t + std::f64::consts::PI).sin(),
                }
            }
            TestFunction::Park4d => {
                let hf = park_high(x);
                match level {
                    Fidelity::High => hf,
                    Fidelity::Low => {
                        let (x1, x2, x3) = (x[0], x[1], x[2]);
                        (1.0 + x1.sin() / 10.0) * hf - 2.0 * x1 + x2 * x2 + x3 * x3 + 0.5
                    }
                }
            }
        }
    }
}

fn park_high(x: &[f64]) -> f64 {
    let x1 = x[0].max(PARK_X1_FLOOR);
    let (x2, x3, x4) = (x[1], x[2], x[3]);
    x1 / 2.0 * ((1.0 + (x2 + x3 * x3) * x4 / (x1 * x1)).sqrt() - 1.0) + (x[0] + 3.0 * x4) * (1.0 + x3.sin()).exp()
}

/// Evaluates one fidelity level of `pair` at every row of `x`.
pub fn eval_testfn(pair: TestFunction, level: Fidelity, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != pair.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} expects {} input columns, got {}",
            pair.name(),
            pair.input_dim(),
            x.ncols()
        )));
    }
    let (lower, upper) = pair.domain();
    for i in 0..x.nrows() {
        for d in 0..x.ncols() {
            let v = x[(i, d)];
            if !(v >= lower[d] && v <= upper[d]) {
                return Err(Error::DomainViolation(format!(
                    "{}: row {i} column {d} value {v} outside [{}, {}]",
                    pair.name(),
                    lower[d],
                    upper[d]
                )));
            }
        }
    }
    let mut buf = vec![0.0; x.ncols()];
    Ok(DVector::from_fn(x.nrows(), |i, _| {
        for (d, b) in buf.iter_mut().enumerate() {
            *b = x[(i, d)];
        }
        pair.eval_point(level, &buf)
    }))
}

/// `y + eps` with `eps` i.i.d. centred Gaussian of the given variance.
pub fn add_noise(y: &DVector<f64>, noise_variance: f64, seed: u64) -> Result<DVector<f64>> {
    if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise variance must be non-negative, got {noise_variance}"
        )));
    }
    if noise_variance == 0.0 {
        return Ok(y.clone());
    }
    let sd = noise_variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(y.map(|v| {
        let e: f64 = rng.sample(StandardNormal);
        v + sd * e
    }))
}
