//! Experiment configuration: one TOML file with explicit sections, every
//! key optional with a documented default, unknown keys rejected. The
//! resolved config is echoed into every artifact so a run can be reproduced
//! from its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorConfig;
use crate::error::{Esm2Error, Result};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Top-k% cutoffs for the precision/recall/F1 tables.
    pub topk_percents: Vec<f64>,
    /// Give tied pairs half credit in AUC instead of the strict indicator.
    pub tie_credit: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            topk_percents: vec![0.1, 0.6, 1.0],
            tie_credit: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk_percents.is_empty() {
            return Err(Esm2Error::InvalidConfig("topk_percents must not be empty".into()));
        }
        for &k in &self.topk_percents {
            if !(k > 0.0 && k <= 100.0) {
                return Err(Esm2Error::InvalidConfig(format!(
                    "top-k percent {k} outside (0, 100]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "runs/data".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            report_dir: "runs/reports".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = fs::read_to_string(path).map_err(|e| Esm2Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&body).map_err(|e| Esm2Error::InvalidConfig(format!(
            "{}: {e}",
            path.display()
        )))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.eval.validate()
    }

    /// Canonical text form, byte-stable for a given resolved config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
