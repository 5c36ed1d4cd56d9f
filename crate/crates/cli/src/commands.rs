//! The `fit` and `predict` subcommands.

use std::path::Path;

use mfkrig::{predict_mf, CovarianceKind, Fidelity, MfData, MfModel, PredictMode};

use crate::config::{read_json, FitConfig};
use crate::csv_io::{read_dataset, read_inputs, write_predictions};
use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

/// Fits a multi-fidelity model to two CSV files and saves it as JSON.
pub fn fit_cmd(lf_csv: &Path, hf_csv: &Path, config_path: &Path, model_out: &Path) -> CliResult<ModelFile> {
    let config: FitConfig = read_json(config_path)?;
    config.validate()?;
    let (lf, names) = read_dataset(lf_csv, None)?;
    let (hf, _) = read_dataset(hf_csv, Some(lf.dim()))?;
    let file = fit_model(MfData::new(lf, hf)?, &config, names)?;
    file.save(model_out)?;
    Ok(file)
}

pub fn fit_model(data: MfData, config: &FitConfig, input_names: Vec<String>) -> CliResult<ModelFile> {
    let mf_config = config.mf_config(&data.lf.x, &data.hf.x);
    let needed = mf_config.rho_basis.len() + mf_config.hf_basis.len() + 1;
    if data.hf.len() < needed {
        return Err(
            mfkrig::Error::InvalidConfig(format!("need at least {needed} HF points, got {}", data.hf.len())).into(),
        );
    }
    let model = mfkrig::fit_mf(&data, &mf_config)?;
    Ok(ModelFile::from_model(&model, config, input_names))
}

/// Means and standard deviations at the rows of `inputs`.
pub fn predict_with(
    model: &MfModel,
    inputs: &nalgebra::DMatrix<f64>,
    level: Fidelity,
    mode: PredictMode,
) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let pred = predict_mf(model, inputs, level, mode, CovarianceKind::Diagonal)?;
    Ok((pred.mean.as_slice().to_vec(), pred.std_devs().as_slice().to_vec()))
}

pub fn predict_cmd(
    model_path: &Path,
    inputs_csv: &Path,
    level: Fidelity,
    mode: PredictMode,
    out_csv: &Path,
) -> CliResult<()> {
    let file = ModelFile::load(model_path)?;
    let model = file.to_model()?;
    let dim = model.hf_data().dim();
    let table = read_inputs(inputs_csv, dim)?;
    let x = table.to_matrix();
    let (mean, sd) = predict_with(&model, &x, level, mode)?;
    write_predictions(out_csv, &table.headers, &x, &mean, &sd)
}

/// Worker count from `MFKRIG_THREADS`, if set.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var("MFKRIG_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "MFKRIG_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(None),
    }
}
