//! JSON configuration files for `bench` and `fit`.

use std::path::{Path, PathBuf};

use mfkrig::mfgp::EmConfig;
use mfkrig::{BasisSpec, EtaBounds, HyperBounds, MfConfig, MultiStartConfig, TestFunction};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisChoice {
    #[default]
    Constant,
    Linear,
}

impl BasisChoice {
    pub fn spec(self, dim: usize) -> BasisSpec {
        match self {
            BasisChoice::Constant => BasisSpec::constant(),
            BasisChoice::Linear => BasisSpec::linear(dim),
        }
    }
}

/// Model and optimizer settings shared by `fit` and the benchmark harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    pub n_starts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub max_em_iterations: usize,
    pub loglik_rel_tolerance: f64,
    pub em_inner_starts: usize,
    pub lf_basis: BasisChoice,
    pub hf_basis: BasisChoice,
    pub rho_basis: BasisChoice,
    /// Pins the LF noise ratio at zero (interpolating LF model).
    pub lf_noise_free: bool,
    pub hf_noise_free: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        let opt = MultiStartConfig::default();
        let em = EmConfig::default();
        Self {
            seed: opt.rng_seed,
            n_starts: opt.n_starts,
            max_iterations: opt.max_iterations,
            gradient_tolerance: opt.gradient_tolerance,
            max_em_iterations: em.max_em_iterations,
            loglik_rel_tolerance: em.loglik_rel_tolerance,
            em_inner_starts: em.inner_starts,
            lf_basis: BasisChoice::Constant,
            hf_basis: BasisChoice::Constant,
            rho_basis: BasisChoice::Constant,
            lf_noise_free: false,
            hf_noise_free: false,
        }
    }
}

impl FitConfig {
    pub fn optimizer(&self) -> MultiStartConfig {
        MultiStartConfig {
            n_starts: self.n_starts,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            rng_seed: self.seed,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.optimizer().validate()?;
        if self.max_em_iterations == 0 || self.em_inner_starts == 0 || !(self.loglik_rel_tolerance > 0.0) {
            return Err(CliError::Config(
                "max_em_iterations and em_inner_starts must be positive, loglik_rel_tolerance > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn bounds(x: &DMatrix<f64>, noise_free: bool) -> HyperBounds {
        let bounds = HyperBounds::default_for(x);
        if noise_free {
            bounds.with_eta(EtaBounds::Fixed(0.0))
        } else {
            bounds
        }
    }

    pub fn mf_config(&self, lf_x: &DMatrix<f64>, hf_x: &DMatrix<f64>) -> MfConfig {
        let dim = lf_x.ncols();
        MfConfig {
            lf_basis: self.lf_basis.spec(dim),
            hf_basis: self.hf_basis.spec(dim),
            rho_basis: self.rho_basis.spec(dim),
            lf_bounds: Some(Self::bounds(lf_x, self.lf_noise_free)),
            hf_bounds: Some(Self::bounds(hf_x, self.hf_noise_free)),
            optimizer: self.optimizer(),
            em: EmConfig {
                max_em_iterations: self.max_em_iterations,
                loglik_rel_tolerance: self.loglik_rel_tolerance,
                inner_starts: self.em_inner_starts,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mf,
    HfOnly,
    LfOnly,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mf => "mf",
            ModelKind::HfOnly => "hf_only",
            ModelKind::LfOnly => "lf_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Analytic1d,
    Park4d,
}

impl BenchmarkKind {
    pub fn test_function(self) -> TestFunction {
        match self {
            BenchmarkKind::Analytic1d => TestFunction::Analytic1d,
            BenchmarkKind::Park4d => TestFunction::Park4d,
        }
    }
}

fn default_design_restarts() -> usize {
    mfkrig::design::DEFAULT_MAXIMIN_RESTARTS
}

fn default_test_restarts() -> usize {
    5
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Mf, ModelKind::HfOnly]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub benchmark: BenchmarkKind,
    pub n_lf: usize,
    pub n_hf: usize,
    pub noise_sd_lf: f64,
    pub noise_sd_hf: f64,
    pub n_test: usize,
    pub n_replications: usize,
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    /// Maximin restarts for the park4d training designs.
    #[serde(default = "default_design_restarts")]
    pub design_restarts: usize,
    /// Maximin restarts for the park4d test set.
    #[serde(default = "default_test_restarts")]
    pub test_restarts: usize,
    #[serde(default)]
    pub fit: FitConfig,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.n_lf == 0 || self.n_hf == 0 || self.n_test < 2 || self.n_replications == 0 {
            return Err(CliError::Config(
                "n_lf, n_hf and n_replications must be positive and n_test at least 2".into(),
            ));
        }
        if !(self.noise_sd_lf >= 0.0 && self.noise_sd_lf.is_finite())
            || !(self.noise_sd_hf >= 0.0 && self.noise_sd_hf.is_finite())
        {
            return Err(CliError::Config(
                "noise standard deviations must be finite and >= 0".into(),
            ));
        }
        if self.models.is_empty() {
            return Err(CliError::Config(
                "models must name at least one of mf, hf_only, lf_only".into(),
            ));
        }
        if self.design_restarts == 0 || self.test_restarts == 0 {
            return Err(CliError::Config("maximin restart counts must be positive".into()));
        }
        self.fit.validate()
    }
}
