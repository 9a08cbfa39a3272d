use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::data::{load_manifest, synth_digits, Corruption, Dataset, DigitStyle, Shift};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TrainConfig};

/// Directory searched for relative dataset and checkpoint paths that do not
/// exist relative to the working directory.
pub const DATA_DIR_ENV: &str = "META_INPUT_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    DomainShift,
    Noisy,
    ComprehensiveNoise,
    Unsupervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    MetaInput,
    BnAdapt,
    MetaUnsup,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::MetaInput => "meta_input",
            Method::BnAdapt => "bn_adapt",
            Method::MetaUnsup => "meta_unsup",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Manifest {
        path: PathBuf,
    },
    Synth {
        n: usize,
        seed: u64,
        #[serde(default)]
        style: DigitStyle,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Checkpoint {
        path: PathBuf,
    },
    /// Pretrain on `ExperimentConfig::source` at the start of the run.
    Pretrain {
        #[serde(default = "ModelSpec::digits")]
        spec: ModelSpec,
        #[serde(default)]
        train: TrainConfig,
        #[serde(default)]
        init_seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DatasetSpec>,
    pub target_train: DatasetSpec,
    pub target_test: DatasetSpec,
    /// Applied to both target splits before any grid corruption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_shift: Option<Shift>,
    /// Fixed corruption defining the target domain (clean→corrupted pairs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_corruption: Option<Corruption>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Corruption grid; one group of cells per entry.
    #[serde(default)]
    pub corruptions: Vec<Corruption>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_ratios() -> Vec<f64> {
    vec![0.01, 0.3, 0.7, 1.0]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Baseline, Method::MetaInput]
}
fn default_repeats() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Usage(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Usage(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(format!("experiment config: {m}")));
        if self.ratios.is_empty() {
            return bad("ratios must not be empty".into());
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("ratio {r} outside (0, 1]"));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        match self.scenario {
            Scenario::Noisy | Scenario::ComprehensiveNoise if self.corruptions.is_empty() => {
                return bad(format!("scenario {:?} needs a non-empty corruptions grid", self.scenario));
            }
            Scenario::ComprehensiveNoise if !self.corruptions.iter().all(|c| matches!(c, Corruption::Comprehensive { .. })) => {
                return bad("comprehensive_noise grid entries must be of kind comprehensive".into());
            }
            Scenario::Unsupervised if !self.methods.contains(&Method::MetaUnsup) => {
                return bad("unsupervised scenario needs method meta_unsup".into());
            }
            _ => {}
        }
        if matches!(self.model, ModelSource::Pretrain { .. }) && self.source.is_none() {
            return bad("model kind pretrain needs a source dataset".into());
        }
        self.adapt.validate()
    }
}

/// `path` as given when it exists or is absolute, otherwise under
/// `$META_INPUT_DATA_DIR` when that is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Path::new(&dir).join(path),
        None => path.to_path_buf(),
    }
}

pub(crate) fn load_dataset(field: &str, spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Manifest { path } => {
            let resolved = resolve_data_path(path);
            if !resolved.exists() {
                return Err(Error::Ingestion {
                    entry: format!("{field} = {}", path.display()),
                    msg: format!("manifest not found at {}", resolved.display()),
                });
            }
            load_manifest(&resolved)
        }
        DatasetSpec::Synth { n, seed, style } => synth_digits(*n, style, *seed),
    }
}
