//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::CohortConfig;
use crate::error::{Error, Result};
use crate::frope::AggregatorConfig;
use crate::omics::{EncoderConfig, ModalityId};
use crate::probes::{DEFAULT_COX_RIDGE, DEFAULT_LOGISTIC_LAMBDA};
use crate::train::TrainConfig;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub aggregator: AggregatorConfig,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub lambda: f64,
    pub cox_ridge: f64,
    pub recall_k: usize,
    /// Embedding column probed by `probe` and `survival`.
    pub probe_modality: ModalityId,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            lambda: DEFAULT_LOGISTIC_LAMBDA,
            cox_ridge: DEFAULT_COX_RIDGE,
            recall_k: 1,
            probe_modality: ModalityId::Wsi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Cohort directory (holding `manifest.json`).
    pub cohort: PathBuf,
    /// Default output directory for commands other than `synth`.
    pub run: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { cohort: PathBuf::from("out"), run: PathBuf::from("run") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub cohort: CohortConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            cohort: CohortConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Applies a seed override, pushes the run seed into every section,
    /// fills derived defaults and checks cross-section consistency.
    pub fn resolved(&self, seed: Option<u64>) -> Result<Self> {
        let mut c = self.clone();
        if let Some(s) = seed {
            c.seed = s;
        }
        c.cohort.seed = c.seed;
        c.train.seed = c.seed;
        c.model.aggregator = c.model.aggregator.resolved()?;
        c.cohort.validate()?;
        c.model.encoder.validate()?;
        c.train.validate()?;
        let enc = &c.model.encoder;
        let checks = [
            ("aggregator patch_dim", c.model.aggregator.patch_dim, c.cohort.patch_dim),
            ("encoder snp_dim", enc.snp_dim, c.cohort.snp_dim),
            ("encoder cnv_dim", enc.cnv_dim, c.cohort.cnv_dim),
            ("encoder meth_dim", enc.meth_dim, c.cohort.meth_dim),
            ("aggregator output_dim", c.model.aggregator.output_dim, enc.output_dim),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!("{what} is {got} but must equal {want}")));
            }
        }
        if c.eval.folds < 2 || c.eval.recall_k == 0 || !(c.eval.lambda > 0.0) || c.eval.cox_ridge < 0.0 {
            return Err(Error::Config("eval needs folds >= 2, recall_k >= 1, lambda > 0 and cox_ridge >= 0".into()));
        }
        Ok(c)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the effective config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.to_pretty_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
