//! Experiment files: a JSON document with top-level keys `data`, `model`,
//! `training`, `methods` and `outputs`.
//!
//! Only `data.n_clients`, `data.samples_per_client`, `model.layer_sizes`
//! and `methods` are required. Defaults:
//!
//! | key | default |
//! |-----|---------|
//! | `data.input_dim` | 2 |
//! | `data.class_count` | 2 |
//! | `data.rotation_step` | 0.5 |
//! | `data.mean_shift_step` | 1.0 |
//! | `data.label_noise` | 0.05 |
//! | `data.class_separation` | 2.0 |
//! | `data.boundary_std` | 0.6 |
//! | `data.lateral_std` | 1.5 |
//! | `data.split` | train 0.60, val 0.15, test 0.25 |
//! | `data.global_test_per_source` | local test size |
//! | `model.activation` | `tanh` |
//! | `training.rounds` | 200 |
//! | `training.local_epochs` | 1 |
//! | `training.batch_size` | 16 |
//! | `training.learning_rate` | 1e-3 |
//! | `training.optimizer` | `adam` |
//! | `training.beta1`, `training.beta2` | 0.9, 0.99 |
//! | `training.fedprox_mu` | 0.01 |
//! | `training.interpolation_start_fraction` | 0.75 |
//! | `training.soup_mode` | `accumulate` |
//! | `training.seed` | 0 |
//! | `training.fine_tune_iters` | [1, 7, 15] |
//! | `training.sharpness` | max_iters 100, tol 1e-6, hvp_eps 1e-4, batch_size = training batch |
//! | `outputs.dir` | `out` |
//! | `outputs.trace` | none |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ShiftSpec;
use crate::engine::{FederatedConfig, Method};
use crate::error::{Error, Result};
use crate::nn::MlpArchitecture;

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Line-delimited JSON round trace; relative paths resolve against `dir`.
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            trace: None,
        }
    }
}

impl OutputSpec {
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn table1(&self) -> PathBuf {
        self.dir.join("table1.csv")
    }
    pub fn tradeoff(&self) -> PathBuf {
        self.dir.join("tradeoff.csv")
    }
    pub fn loo(&self) -> PathBuf {
        self.dir.join("loo.csv")
    }
    pub fn sharpness(&self) -> PathBuf {
        self.dir.join("sharpness.csv")
    }
    pub fn federation(&self) -> PathBuf {
        self.dir.join("federation.json")
    }
    pub fn trace_path(&self) -> Option<PathBuf> {
        self.trace.as_ref().map(|t| self.dir.join(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: ShiftSpec,
    pub model: MlpArchitecture,
    #[serde(default)]
    pub training: FederatedConfig,
    #[serde(default)]
    pub outputs: OutputSpec,
    pub methods: Vec<Method>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.input_dim() != self.data.input_dim {
            return Err(Error::config(format!(
                "model.layer_sizes starts with {} but data.input_dim is {}",
                self.model.input_dim(),
                self.data.input_dim
            )));
        }
        if self.model.classes() != self.data.class_count {
            return Err(Error::config(format!(
                "model.layer_sizes ends with {} but data.class_count is {}",
                self.model.classes(),
                self.data.class_count
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must not be empty"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::config(format!("methods lists `{m}` twice")));
            }
            self.training.with_method(*m).validate()?;
        }
        if self.training.fine_tune_iters.is_empty() {
            return Err(Error::config("training.fine_tune_iters must not be empty"));
        }
        Ok(())
    }

    /// Training config for one method of the comparison.
    pub fn training_for(&self, method: Method) -> FederatedConfig {
        self.training.with_method(method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Extracts the first backtick-quoted name from a serde message.
fn quoted(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn classify(err: serde_json::Error) -> Error {
    use serde_json::error::Category;
    let message = err.to_string();
    if err.classify() == Category::Data {
        if message.starts_with("unknown field") {
            if let Some(key) = quoted(&message) {
                return Error::UnknownKey(key);
            }
        }
        if message.starts_with("missing field") {
            if let Some(key) = quoted(&message) {
                return Error::MissingKey(key);
            }
        }
        return Error::Config(message);
    }
    Error::Syntax {
        line: err.line(),
        column: err.column(),
        message,
    }
}

/// Parses and validates an experiment document.
pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = serde_json::from_str(text).map_err(classify)?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    parse_config_str(&text)
}
