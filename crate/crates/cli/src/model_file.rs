//! Self-contained JSON model files.

use std::path::Path;

use mfkrig::gp::FitLog;
use mfkrig::mfgp::EmLog;
use mfkrig::{BasisSpec, Dataset, GpHyper, HfParams, MfModel, TrainedGp};
use serde::{Deserialize, Serialize};

use crate::config::FitConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfSection {
    pub data: Dataset,
    pub basis: BasisSpec,
    pub hyper: GpHyper,
    pub fit_log: FitLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HfSection {
    pub data: Dataset,
    pub basis: BasisSpec,
    pub rho_basis: BasisSpec,
    pub params: HfParams,
    pub em_log: EmLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub input_names: Vec<String>,
    pub config: FitConfig,
    pub lf: LfSection,
    pub hf: HfSection,
}

impl ModelFile {
    pub fn from_model(model: &MfModel, config: &FitConfig, input_names: Vec<String>) -> Self {
        let lf = model.lf_model();
        Self {
            format_version: FORMAT_VERSION,
            input_names,
            config: config.clone(),
            lf: LfSection {
                data: lf.data().clone(),
                basis: lf.basis().clone(),
                hyper: lf.hyper().clone(),
                fit_log: lf.fit_log().clone(),
            },
            hf: HfSection {
                data: model.hf_data().clone(),
                basis: model.hf_basis().clone(),
                rho_basis: model.rho_basis().clone(),
                params: model.hf_params().clone(),
                em_log: model.em_log().clone(),
            },
        }
    }

    /// Rebuilds the fitted model, recomputing every cached factorization.
    pub fn to_model(&self) -> CliResult<MfModel> {
        let lf = TrainedGp::from_hyper(
            self.lf.data.clone(),
            self.lf.basis.clone(),
            self.lf.hyper.clone(),
            self.lf.fit_log.clone(),
        )?;
        Ok(MfModel::from_parts(
            lf,
            self.hf.data.clone(),
            self.hf.params.clone(),
            self.hf.basis.clone(),
            self.hf.rho_basis.clone(),
            self.hf.em_log.clone(),
        )?)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(CliError::Config(format!(
                    "{}: unsupported format_version {v} (expected {FORMAT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(CliError::Config(format!("{}: missing format_version", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
