//! Replicated benchmark campaigns on the analytical test-function pairs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use mfkrig::design::{add_noise, derive_seed, eval_testfn, lhs, maximin_lhs};
use mfkrig::metrics::{coverage_report, default_alpha_grid};
use mfkrig::numerics::track_peak_factorization;
use mfkrig::{fit_gp, fit_mf, predict_mf, CalibrationReport, CovarianceKind, Dataset, Fidelity, MfData, PredictMode};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BenchmarkConfig, BenchmarkKind, FitConfig, ModelKind};
use crate::error::{CliError, CliResult};

/// Levels reported individually in the results table.
pub const REPORTED_LEVELS: [f64; 4] = [0.1, 0.5, 0.9, 0.95];

/// One fitted model on one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsRow {
    pub replication_index: usize,
    pub model_name: &'static str,
    pub q2: f64,
    pub iae_ci: f64,
    pub iae_pi: f64,
    pub ciw_95: f64,
    pub piw_95: f64,
    pub noise_var_hat_lf: Option<f64>,
    pub noise_var_hat_hf: Option<f64>,
    pub fit_seconds: f64,
    /// CICP and PICP at [`REPORTED_LEVELS`].
    pub cicp: [f64; 4],
    pub picp: [f64; 4],
    pub em_iterations: Option<usize>,
    /// Largest drop of the observed-data log-likelihood between EM iterates
    /// (0 for a monotone trace).
    pub em_max_decrease: Option<f64>,
    pub peak_factorization: Option<usize>,
    pub failed: bool,
    pub error: Option<String>,
}

impl ResultsRow {
    fn failure(replication_index: usize, model: ModelKind, error: String) -> Self {
        Self {
            replication_index,
            model_name: model.name(),
            q2: f64::NAN,
            iae_ci: f64::NAN,
            iae_pi: f64::NAN,
            ciw_95: f64::NAN,
            piw_95: f64::NAN,
            noise_var_hat_lf: None,
            noise_var_hat_hf: None,
            fit_seconds: 0.0,
            cicp: [f64::NAN; 4],
            picp: [f64::NAN; 4],
            em_iterations: None,
            em_max_decrease: None,
            peak_factorization: None,
            failed: true,
            error: Some(error),
        }
    }

    fn from_report(replication_index: usize, model: ModelKind, report: &CalibrationReport, fit_seconds: f64) -> Self {
        let pick = |v: &[f64]| REPORTED_LEVELS.map(|a| v[report.level_index(a).expect("reported level on grid")]);
        let i95 = report.level_index(0.95).expect("0.95 on grid");
        Self {
            replication_index,
            model_name: model.name(),
            q2: report.q2,
            iae_ci: report.iae_ci,
            iae_pi: report.iae_pi,
            ciw_95: report.ciw[i95],
            piw_95: report.piw[i95],
            noise_var_hat_lf: None,
            noise_var_hat_hf: None,
            fit_seconds,
            cicp: pick(&report.cicp),
            picp: pick(&report.picp),
            em_iterations: None,
            em_max_decrease: None,
            peak_factorization: None,
            failed: false,
            error: None,
        }
    }
}

/// Training data, test inputs, latent truth and one noisy draw per test point
/// for a single replication.
pub struct Replication {
    pub data: MfData,
    pub x_test: DMatrix<f64>,
    pub y_test_lf: DVector<f64>,
    pub y_test_hf: DVector<f64>,
    pub z_test_lf: DVector<f64>,
    pub z_test_hf: DVector<f64>,
    pub fit_seed: u64,
}

fn evenly_spaced(n: usize, lower: f64, upper: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |i, _| lower + (upper - lower) * i as f64 / (n - 1) as f64)
}

/// Per-replication sub-seed streams.
mod stream {
    pub const LF_DESIGN: u64 = 0;
    pub const HF_DESIGN: u64 = 1;
    pub const LF_NOISE: u64 = 2;
    pub const HF_NOISE: u64 = 3;
    pub const TEST_DESIGN: u64 = 4;
    pub const TEST_NOISE_LF: u64 = 5;
    pub const TEST_NOISE_HF: u64 = 6;
    pub const FIT: u64 = 7;
}

pub fn replication_seed(config: &BenchmarkConfig, index: usize) -> u64 {
    derive_seed(config.seed, index as u64)
}

pub fn sample_replication(config: &BenchmarkConfig, index: usize) -> CliResult<Replication> {
    let seed = replication_seed(config, index);
    let sub = |s: u64| derive_seed(seed, s);
    let f = config.benchmark.test_function();
    let (lower, upper) = f.domain();
    let d = f.input_dim();
    let (x_l, x_h, x_test) = match config.benchmark {
        BenchmarkKind::Analytic1d => (
            lhs(config.n_lf, d, sub(stream::LF_DESIGN)).scaled(&lower, &upper),
            lhs(config.n_hf, d, sub(stream::HF_DESIGN)).scaled(&lower, &upper),
            evenly_spaced(config.n_test, lower[0], upper[0]),
        ),
        BenchmarkKind::Park4d => (
            maximin_lhs(config.n_lf, d, config.design_restarts, sub(stream::LF_DESIGN)).scaled(&lower, &upper),
            maximin_lhs(config.n_hf, d, config.design_restarts, sub(stream::HF_DESIGN)).scaled(&lower, &upper),
            maximin_lhs(config.n_test, d, config.test_restarts, sub(stream::TEST_DESIGN)).scaled(&lower, &upper),
        ),
    };
    let var_l = config.noise_sd_lf * config.noise_sd_lf;
    let var_h = config.noise_sd_hf * config.noise_sd_hf;
    let z_l = add_noise(&eval_testfn(f, Fidelity::Low, &x_l)?, var_l, sub(stream::LF_NOISE))?;
    let z_h = add_noise(&eval_testfn(f, Fidelity::High, &x_h)?, var_h, sub(stream::HF_NOISE))?;
    let y_test_lf = eval_testfn(f, Fidelity::Low, &x_test)?;
    let y_test_hf = eval_testfn(f, Fidelity::High, &x_test)?;
    let z_test_lf = add_noise(&y_test_lf, var_l, sub(stream::TEST_NOISE_LF))?;
    let z_test_hf = add_noise(&y_test_hf, var_h, sub(stream::TEST_NOISE_HF))?;
    Ok(Replication {
        data: MfData::new(Dataset::new(x_l, z_l)?, Dataset::new(x_h, z_h)?)?,
        x_test,
        y_test_lf,
        y_test_hf,
        z_test_lf,
        z_test_hf,
        fit_seed: sub(stream::FIT),
    })
}

fn evaluate(
    rep: &Replication,
    level: Fidelity,
    mean: &DVector<f64>,
    sd: &DVector<f64>,
    noise_var_hat: f64,
) -> mfkrig::Result<CalibrationReport> {
    let (y, z) = match level {
        Fidelity::Low => (&rep.y_test_lf, &rep.z_test_lf),
        Fidelity::High => (&rep.y_test_hf, &rep.z_test_hf),
    };
    coverage_report(
        y.as_slice(),
        z.as_slice(),
        mean.as_slice(),
        sd.as_slice(),
        noise_var_hat,
        &default_alpha_grid(),
    )
}

fn run_model(rep: &Replication, index: usize, model: ModelKind, fit: &FitConfig) -> mfkrig::Result<ResultsRow> {
    let fit = FitConfig {
        seed: rep.fit_seed,
        ..fit.clone()
    };
    let start = Instant::now();
    match model {
        ModelKind::Mf => {
            let config = fit.mf_config(&rep.data.lf.x, &rep.data.hf.x);
            let (fitted, peak) = track_peak_factorization(|| fit_mf(&rep.data, &config));
            let fitted = fitted?;
            let seconds = start.elapsed().as_secs_f64();
            let pred = predict_mf(
                &fitted,
                &rep.x_test,
                Fidelity::High,
                PredictMode::Latent,
                CovarianceKind::Diagonal,
            )?;
            let noise_hf = fitted.hf_params().noise_variance();
            let report = evaluate(rep, Fidelity::High, &pred.mean, &pred.std_devs(), noise_hf)?;
            let trace = &fitted.em_log().loglik;
            let mut row = ResultsRow::from_report(index, model, &report, seconds);
            row.noise_var_hat_lf = Some(fitted.lf_model().noise_variance());
            row.noise_var_hat_hf = Some(noise_hf);
            row.em_iterations = Some(trace.len().saturating_sub(1));
            row.em_max_decrease = Some(trace.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max));
            row.peak_factorization = Some(peak);
            Ok(row)
        }
        ModelKind::HfOnly | ModelKind::LfOnly => {
            let (data, basis, noise_free, level) = if model == ModelKind::HfOnly {
                (&rep.data.hf, fit.hf_basis, fit.hf_noise_free, Fidelity::High)
            } else {
                (&rep.data.lf, fit.lf_basis, fit.lf_noise_free, Fidelity::Low)
            };
            let bounds = FitConfig::bounds(&data.x, noise_free);
            let (gp, peak) =
                track_peak_factorization(|| fit_gp(data, &basis.spec(data.dim()), &bounds, &fit.optimizer()));
            let gp = gp?;
            let seconds = start.elapsed().as_secs_f64();
            let pred = gp.predict(&rep.x_test, PredictMode::Latent, CovarianceKind::Diagonal)?;
            let report = evaluate(rep, level, &pred.mean, &pred.std_devs(), gp.noise_variance())?;
            let mut row = ResultsRow::from_report(index, model, &report, seconds);
            if level == Fidelity::High {
                row.noise_var_hat_hf = Some(gp.noise_variance());
            } else {
                row.noise_var_hat_lf = Some(gp.noise_variance());
            }
            row.peak_factorization = Some(peak);
            Ok(row)
        }
    }
}

fn run_replication(config: &BenchmarkConfig, index: usize) -> Vec<ResultsRow> {
    match sample_replication(config, index) {
        Ok(rep) => config
            .models
            .iter()
            .map(|&m| {
                run_model(&rep, index, m, &config.fit).unwrap_or_else(|e| ResultsRow::failure(index, m, e.to_string()))
            })
            .collect(),
        Err(e) => config
            .models
            .iter()
            .map(|&m| ResultsRow::failure(index, m, e.to_string()))
            .collect(),
    }
}

/// Runs every replication on the current rayon pool and returns the rows in
/// replication order.
pub fn run_replications(config: &BenchmarkConfig) -> CliResult<Vec<ResultsRow>> {
    config.validate()?;
    let per_rep: Vec<Vec<ResultsRow>> = (0..config.n_replications)
        .into_par_iter()
        .map(|r| run_replication(config, r))
        .collect();
    Ok(per_rep.into_iter().flatten().collect())
}

const HEADER: &[&str] = &[
    "replication_index",
    "model_name",
    "q2",
    "iae_ci",
    "iae_pi",
    "ciw_95",
    "piw_95",
    "noise_var_hat_lf",
    "noise_var_hat_hf",
    "fit_seconds",
    "cicp_0.1",
    "cicp_0.5",
    "cicp_0.9",
    "cicp_0.95",
    "picp_0.1",
    "picp_0.5",
    "picp_0.9",
    "picp_0.95",
    "em_iterations",
    "em_max_decrease",
    "peak_factorization",
    "failed",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_results<W: Write>(rows: &[ResultsRow], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(HEADER)?;
    for r in rows {
        let mut record = vec![
            r.replication_index.to_string(),
            r.model_name.to_string(),
            r.q2.to_string(),
            r.iae_ci.to_string(),
            r.iae_pi.to_string(),
            r.ciw_95.to_string(),
            r.piw_95.to_string(),
            opt(r.noise_var_hat_lf),
            opt(r.noise_var_hat_hf),
            r.fit_seconds.to_string(),
        ];
        record.extend(r.cicp.iter().chain(&r.picp).map(f64::to_string));
        record.extend([
            opt(r.em_iterations),
            opt(r.em_max_decrease),
            opt(r.peak_factorization),
            r.failed.to_string(),
            r.error.clone().unwrap_or_default(),
        ]);
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Mean of each reported column over the successful rows of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model_name: &'static str,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_cicp: [f64; 4],
    pub mean_picp: [f64; 4],
    pub median_one_minus_q2: f64,
    pub mean_iae_ci: f64,
    pub mean_iae_pi: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(rows: &[ResultsRow], model: ModelKind) -> ModelSummary {
    let ok: Vec<&ResultsRow> = rows
        .iter()
        .filter(|r| r.model_name == model.name() && !r.failed)
        .collect();
    let n_failed = rows.iter().filter(|r| r.model_name == model.name() && r.failed).count();
    let n = ok.len() as f64;
    let mean = |f: &dyn Fn(&ResultsRow) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
    ModelSummary {
        model_name: model.name(),
        n_ok: ok.len(),
        n_failed,
        mean_cicp: std::array::from_fn(|k| mean(&|r| r.cicp[k])),
        mean_picp: std::array::from_fn(|k| mean(&|r| r.picp[k])),
        median_one_minus_q2: median(ok.iter().map(|r| 1.0 - r.q2).collect()),
        mean_iae_ci: mean(&|r| r.iae_ci),
        mean_iae_pi: mean(&|r| r.iae_pi),
    }
}

/// Runs the campaign and writes the results table to `config.output_path`
/// (or `out` when none is set).
pub fn run_benchmark<W: Write>(config: &BenchmarkConfig, out: W) -> CliResult<Vec<ResultsRow>> {
    let rows = run_replications(config)?;
    match &config.output_path {
        Some(path) => {
            let file = std::fs::File::create(path)
                .map_err(|e| CliError::io(format!("cannot create {}", path.display()), e))?;
            write_results(&rows, file).map_err(|e| csv_io_error(path, e))?;
            write_metadata(config, &rows, &metadata_path(path))?;
        }
        None => write_results(&rows, out).map_err(|e| csv_io_error(Path::new("<stdout>"), e))?,
    }
    Ok(rows)
}

/// Campaign description written next to the results table.
#[derive(Debug, Serialize)]
struct CampaignMetadata<'a> {
    tool_version: &'static str,
    config: &'a BenchmarkConfig,
    rows: usize,
    failed_rows: usize,
    reported_levels: [f64; 4],
}

/// `results.csv` becomes `results.csv.meta.json`.
pub fn metadata_path(results: &Path) -> std::path::PathBuf {
    let mut name = results.as_os_str().to_owned();
    name.push(".meta.json");
    name.into()
}

fn write_metadata(config: &BenchmarkConfig, rows: &[ResultsRow], path: &Path) -> CliResult<()> {
    let meta = CampaignMetadata {
        tool_version: env!("CARGO_PKG_VERSION"),
        config,
        rows: rows.len(),
        failed_rows: rows.iter().filter(|r| r.failed).count(),
        reported_levels: REPORTED_LEVELS,
    };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e.into()))?;
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn csv_io_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(format!("cannot write {}", path.display()), e.into())
}
