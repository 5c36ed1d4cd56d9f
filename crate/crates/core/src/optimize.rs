//! Box-constrained minimization: a projected limited-memory BFGS with
//! Armijo backtracking along the projection arc, plus a seeded multi-start
//! driver.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;
const STALL_RELATIVE: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "bounds must be non-empty and of equal length ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::InvalidConfig(format!("invalid bound {i}: [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        x.iter()
            .zip(g)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((xi, gi), (l, u))| ((xi - gi).clamp(*l, *u) - xi).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStartConfig {
    pub n_starts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub rng_seed: u64,
}

impl Default for MultiStartConfig {
    fn default() -> Self {
        Self {
            n_starts: 10,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            rng_seed: 0,
        }
    }
}

impl MultiStartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 || self.max_iterations == 0 || !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "invalid multi-start configuration {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

fn evaluate<F>(objective: &mut F, x: &[f64]) -> Option<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (f, g) = objective(x);
    (f.is_finite() && g.len() == x.len() && g.iter().all(|v| v.is_finite())).then_some((f, g))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion: returns `H q` for the current inverse-Hessian estimate.
fn two_loop(q: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut r = q.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &r);
        for (ri, yi) in r.iter_mut().zip(y) {
            *ri -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        r.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &r);
        for (ri, si) in r.iter_mut().zip(s) {
            *ri += (a - b) * si;
        }
    }
    r
}

/// Minimizes `objective` over `bounds` from a feasible `start`.
///
/// The objective returns `(value, gradient)`; a non-finite value marks the
/// point as infeasible for the line search, which then backtracks.
pub fn minimize_box<F>(
    mut objective: F,
    bounds: &BoxBounds,
    start: &[f64],
    max_iterations: usize,
    gradient_tolerance: f64,
) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if start.len() != bounds.dim() {
        return Err(Error::DimensionMismatch(format!(
            "start has {} entries, bounds have {}",
            start.len(),
            bounds.dim()
        )));
    }
    let n = start.len();
    let mut x = start.to_vec();
    bounds.project(&mut x);
    let (mut f, mut g) = evaluate(&mut objective, &x).ok_or(Error::ObjectiveNonFinite)?;
    let mut trace = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iterations {
        if bounds.projected_gradient_norm(&x, &g) <= gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        // Variables pinned at a bound with the gradient pushing outward stay fixed.
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0)))
            .collect();
        let masked_g: Vec<f64> = g.iter().zip(&free).map(|(v, f)| if *f { *v } else { 0.0 }).collect();

        let mut accepted = None;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !memory.is_empty();
            let direction: Vec<f64> = if use_memory {
                two_loop(&masked_g, &memory)
                    .into_iter()
                    .zip(&free)
                    .map(|(v, f)| if *f { -v } else { 0.0 })
                    .collect()
            } else {
                let scale = masked_g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                let step = if scale > 1.0 { 1.0 / scale } else { 1.0 };
                masked_g.iter().map(|v| -v * step).collect()
            };
            if use_memory && dot(&direction, &g) >= 0.0 {
                memory.clear();
                continue;
            }
            let mut t = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                let mut trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + t * di).collect();
                bounds.project(&mut trial);
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                if step.iter().all(|s| *s == 0.0) {
                    break;
                }
                if let Some((ft, gt)) = evaluate(&mut objective, &trial) {
                    if ft <= f + ARMIJO_C1 * dot(&g, &step) {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() || !use_memory {
                break;
            }
            memory.clear();
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if memory.len() == MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let stalled = (f - f_new) <= STALL_RELATIVE * f.abs().max(f_new.abs()).max(1.0);
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        if stalled {
            converged = bounds.projected_gradient_norm(&x, &g) <= gradient_tolerance;
            break;
        }
    }
    if !converged {
        converged = bounds.projected_gradient_norm(&x, &g) <= gradient_tolerance;
    }
    Ok(MinimizeResult {
        x,
        value: f,
        converged,
        iterations,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartRecord {
    pub start: Vec<f64>,
    pub outcome: std::result::Result<MinimizeResult, Error>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStartResult {
    pub best: MinimizeResult,
    pub best_index: usize,
    pub log: Vec<StartRecord>,
}

/// Runs [`minimize_box`] from `config.n_starts` seeded points drawn uniformly
/// in `bounds` and keeps the lowest value (first index wins ties).
pub fn multi_start_minimize<F>(objective: F, bounds: &BoxBounds, config: &MultiStartConfig) -> Result<MultiStartResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    multi_start_minimize_with(objective, bounds, config, &[])
}

/// As [`multi_start_minimize`], with caller-supplied starting points run
/// before the random ones.
pub fn multi_start_minimize_with<F>(
    mut objective: F,
    bounds: &BoxBounds,
    config: &MultiStartConfig,
    extra_starts: &[Vec<f64>],
) -> Result<MultiStartResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut starts: Vec<Vec<f64>> = extra_starts
        .iter()
        .map(|s| {
            let mut s = s.clone();
            bounds.project(&mut s);
            s
        })
        .collect();
    for _ in 0..config.n_starts {
        starts.push(
            bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(l, u)| rng.random_range(*l..*u))
                .collect(),
        );
    }

    let mut log = Vec::with_capacity(starts.len());
    let mut best: Option<(usize, MinimizeResult)> = None;
    for (i, start) in starts.into_iter().enumerate() {
        let outcome = minimize_box(
            &mut objective,
            bounds,
            &start,
            config.max_iterations,
            config.gradient_tolerance,
        );
        if let Ok(r) = &outcome {
            if best.as_ref().is_none_or(|(_, b)| r.value < b.value) {
                best = Some((i, r.clone()));
            }
        }
        log.push(StartRecord { start, outcome });
    }
    let (best_index, best) = best.ok_or(Error::AllStartsFailed)?;
    Ok(MultiStartResult { best, best_index, log })
}
