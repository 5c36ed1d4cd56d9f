//! Symmetric positive definite factorizations and the solves built on them.
//!
//! Every likelihood and prediction routine consumes an [`SpdFactorization`];
//! no code path forms an explicit inverse through a generic routine.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter levels tried, in order, after a bare factorization fails.
/// Each is multiplied by the mean of the diagonal.
pub const DEFAULT_JITTER_LEVELS: [f64; 3] = [1e-10, 1e-8, 1e-6];

const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct JitterPolicy {
    pub relative_levels: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            relative_levels: DEFAULT_JITTER_LEVELS.to_vec(),
        }
    }
}

impl JitterPolicy {
    /// Fail immediately if the bare factorization fails.
    pub fn none() -> Self {
        Self {
            relative_levels: Vec::new(),
        }
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = M + jitter_used · I`.
#[derive(Debug, Clone)]
pub struct SpdFactorization {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl SpdFactorization {
    pub fn lower_factor(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `(M + jitter·I) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        solve_spd(self, b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has {} rows, factor is {}x{}",
                b.len(),
                self.dim(),
                self.dim()
            )));
        }
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// Returns `L⁻¹ B`, the half-solve used for quadratic forms `Bᵀ M⁻¹ B`.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has {} rows, factor is {}x{}",
                b.nrows(),
                self.dim(),
                self.dim()
            )));
        }
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// `M⁻¹` assembled column by column from solves against the identity.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut x = DMatrix::identity(n, n);
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        x.fill_upper_triangle_with_lower_triangle();
        x
    }

    pub fn logdet(&self) -> f64 {
        logdet_spd(self)
    }
}

thread_local! {
    static PEAK_DIMENSION: Cell<usize> = const { Cell::new(0) };
}

/// Runs `f` and reports the largest matrix dimension factorized on this
/// thread while it ran.
pub fn track_peak_factorization<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let saved = PEAK_DIMENSION.with(|p| p.replace(0));
    let out = f();
    let peak = PEAK_DIMENSION.with(|p| p.replace(saved.max(p.get())));
    (out, peak)
}

fn record_dimension(n: usize) {
    PEAK_DIMENSION.with(|p| {
        if n > p.get() {
            p.set(n);
        }
    });
}

/// Cholesky factorization with jitter escalation.
pub fn chol_factor(m: &DMatrix<f64>, policy: &JitterPolicy) -> Result<SpdFactorization> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut mismatch = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            mismatch = mismatch.max((m[(i, j)] - m[(j, i)]).abs() / scale);
        }
    }
    if !(mismatch <= SYMMETRY_TOLERANCE) {
        return Err(Error::NotSymmetric(mismatch));
    }
    record_dimension(n);

    if let Some(lower) = cholesky_lower(m, 0.0) {
        return Ok(SpdFactorization {
            lower,
            jitter_used: 0.0,
        });
    }
    let mean_diag = if n == 0 { 0.0 } else { m.diagonal().mean().abs() };
    let mut last = 0.0;
    for level in &policy.relative_levels {
        let jitter = level * mean_diag;
        last = jitter;
        if jitter <= 0.0 {
            continue;
        }
        if let Some(lower) = cholesky_lower(m, jitter) {
            return Ok(SpdFactorization {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::NotPositiveDefinite(last))
}

fn cholesky_lower(m: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut a = m.clone();
    if jitter > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
    }
    let chol = nalgebra::Cholesky::new(a)?;
    let l = chol.unpack();
    if l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(l)
    } else {
        None
    }
}

pub fn solve_spd(f: &SpdFactorization, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = f.half_solve(b)?;
    f.lower.tr_solve_lower_triangular_mut(&mut x);
    Ok(x)
}

pub fn logdet_spd(f: &SpdFactorization) -> f64 {
    2.0 * f.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
