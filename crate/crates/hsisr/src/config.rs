//! Experiment configuration: one TOML document with `[model]`, `[train]`,
//! and `[data]` sections. Every field is optional and falls back to the
//! library defaults; unknown keys are rejected so a typo cannot silently
//! change a run. Parse → serialize → parse is a fixed point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::tensor::ActivationKind;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field {0}: {1}")]
    Invalid(&'static str, String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub bands: Option<usize>,
    pub feature_width: Option<usize>,
    pub num_residual_blocks: Option<usize>,
    pub global_residual: Option<bool>,
    pub activation: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub w_mse: Option<f64>,
    pub w_spatial: Option<f64>,
    pub w_spectral: Option<f64>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub early_stop_min_delta: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint_cadence: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Degradation scale the manifest pairs were prepared with; checked
    /// against the manifest when present.
    pub scale: Option<usize>,
    /// Patch size the pairs were prepared with; checked against the data.
    pub patch_size: Option<usize>,
}

/// The whole experiment document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves the model section; `bands_from_data` fills the band count
    /// when the config omits it (and must agree when it does not).
    pub fn model_config(&self, bands_from_data: Option<usize>) -> Result<ModelConfig, ConfigError> {
        let bands = match (self.model.bands, bands_from_data) {
            (Some(b), Some(d)) if b != d => {
                return Err(ConfigError::Invalid(
                    "model.bands",
                    format!("config says {b} but the dataset has {d} bands"),
                ))
            }
            (Some(b), _) => b,
            (None, Some(d)) => d,
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "model.bands",
                    "not set and no dataset to infer it from".into(),
                ))
            }
        };
        let activation = match self.model.activation.as_deref() {
            None | Some("relu") => ActivationKind::ReLU,
            Some("identity") => ActivationKind::Identity,
            Some(other) => {
                return Err(ConfigError::Invalid(
                    "model.activation",
                    format!("unknown activation '{other}' (expected relu|identity)"),
                ))
            }
        };
        let defaults = ModelConfig::new(bands);
        Ok(ModelConfig {
            bands,
            feature_width: self.model.feature_width.unwrap_or(defaults.feature_width),
            num_residual_blocks: self
                .model
                .num_residual_blocks
                .unwrap_or(defaults.num_residual_blocks),
            global_residual: self.model.global_residual.unwrap_or(true),
            activation,
            seed: self.model.seed.unwrap_or(0),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let dw = LossWeights::default();
        TrainConfig {
            batch_size: self.train.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.train.learning_rate.unwrap_or(d.learning_rate),
            adam_beta1: self.train.adam_beta1.unwrap_or(d.adam_beta1),
            adam_beta2: self.train.adam_beta2.unwrap_or(d.adam_beta2),
            adam_epsilon: self.train.adam_epsilon.unwrap_or(d.adam_epsilon),
            loss_weights: LossWeights {
                w_mse: self.train.w_mse.unwrap_or(dw.w_mse),
                w_spatial: self.train.w_spatial.unwrap_or(dw.w_spatial),
                w_spectral: self.train.w_spectral.unwrap_or(dw.w_spectral),
            },
            max_epochs: self.train.max_epochs.unwrap_or(d.max_epochs),
            early_stop_patience: self
                .train
                .early_stop_patience
                .unwrap_or(d.early_stop_patience),
            early_stop_min_delta: self
                .train
                .early_stop_min_delta
                .unwrap_or(d.early_stop_min_delta),
            seed: self.train.seed.unwrap_or(d.seed),
            checkpoint_cadence: self
                .train
                .checkpoint_cadence
                .unwrap_or(d.checkpoint_cadence),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[model]
bands = 16
feature_width = 24
num_residual_blocks = 2
seed = 7

[train]
batch_size = 4
learning_rate = 1e-4
max_epochs = 20

[data]
manifest = "data/manifest.toml"
out_dir = "runs/exp1"
scale = 2
"#;

    #[test]
    fn parse_serialize_parse_is_a_fixed_point() {
        let a = CliConfig::parse(SAMPLE).unwrap();
        let b = CliConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        let c = CliConfig::parse(&b.to_toml()).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = CliConfig::parse("[model]\nbands = 4\nbandz = 5\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bandz"), "error should name the key: {msg}");
        let err = CliConfig::parse("[optimizer]\nlr = 0.1\n").unwrap_err();
        assert!(format!("{err}").contains("optimizer"));
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = CliConfig::parse("").unwrap();
        let t = cfg.train_config();
        assert_eq!(t.batch_size, 4);
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.loss_weights.w_mse, 2.0);
        assert_eq!(t.max_epochs, 500);
        let m = cfg.model_config(Some(32)).unwrap();
        assert_eq!(m.bands, 32);
        assert_eq!(m.feature_width, 56);
        assert_eq!(m.num_residual_blocks, 3);
        assert!(m.global_residual);
    }

    #[test]
    fn band_disagreement_is_an_error() {
        let cfg = CliConfig::parse("[model]\nbands = 8\n").unwrap();
        assert!(cfg.model_config(Some(16)).is_err());
        assert_eq!(cfg.model_config(Some(8)).unwrap().bands, 8);
        assert_eq!(cfg.model_config(None).unwrap().bands, 8);
        let empty = CliConfig::parse("").unwrap();
        assert!(empty.model_config(None).is_err());
    }

    #[test]
    fn bad_activation_is_rejected() {
        let cfg = CliConfig::parse("[model]\nbands = 4\nactivation = \"tanh\"\n").unwrap();
        let err = cfg.model_config(None).unwrap_err();
        assert!(format!("{err}").contains("tanh"));
    }
}
