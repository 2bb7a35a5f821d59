//! Run configuration: a JSON file, overridden by `DOCMSU_*` environment
//! variables, overridden by command-line flags.
//!
//! Nested keys use a double underscore in the environment, so
//! `DOCMSU_TRAIN__EPOCHS=3` sets `train.epochs`.

use std::path::{Path, PathBuf};

use figment::providers::{Env, Format, Json, Serialized};
use figment::Figment;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::model::eval::EvalOptions;
use crate::model::train::TrainConfig;
use crate::model::{ModelConfig, Preset};

pub const ENV_PREFIX: &str = "DOCMSU_";

/// The schema shipped with the crate; a test keeps it in sync.
pub const PUBLISHED_SCHEMA: &str = include_str!("../../schema/run_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset JSONL.
    pub dataset: Option<PathBuf>,
    /// Directory image paths are relative to; defaults to the dataset's
    /// directory.
    pub images: Option<PathBuf>,
    /// Output directory.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            images: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    /// Seeds model initialization and batch order; the split keeps its own
    /// seed so that repeated runs share one partition.
    pub seed: u64,
    /// Missing image files fail ingestion instead of warning.
    pub strict_images: bool,
    pub model: ModelConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub metrics: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Tiny)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            paths: PathsConfig::default(),
            seed: 0,
            strict_images: false,
            model: ModelConfig::from_preset(preset),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            metrics: EvalOptions::default(),
        }
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.validate()?;
        self.train.validate()
    }
}

/// JSON schema of [`RunConfig`].
pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

/// Checks a JSON document against the published schema.
pub fn validate_against_schema(value: &serde_json::Value) -> Result<()> {
    let schema: serde_json::Value = serde_json::from_str(PUBLISHED_SCHEMA)?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| Error::Config(format!("bad schema: {e}")))?;
    let errors: Vec<String> = validator
        .iter_errors(value)
        .map(|e| format!("{}: {e}", e.instance_path()))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errors.join("; ")))
    }
}

/// Layers file, environment and flag overrides. `overrides` is a JSON
/// object in the shape of [`RunConfig`] holding only the keys the flags set.
/// The model defaults follow whichever preset the layers select.
pub fn load(file: Option<&Path>, env_prefix: &str, overrides: &serde_json::Value) -> Result<RunConfig> {
    let mut layers = Figment::new();
    if let Some(path) = file {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("config file {}", path.display())));
        }
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        validate_against_schema(&raw)?;
        layers = layers.merge(Json::file(path));
    }
    let layers = layers
        .merge(Env::prefixed(env_prefix).split("__"))
        .merge(Serialized::defaults(overrides));

    let preset: Preset = match layers.extract_inner::<Preset>("model.preset") {
        Ok(p) => p,
        Err(e) if e.missing() => Preset::Tiny,
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let cfg: RunConfig = Figment::from(Serialized::defaults(RunConfig::for_preset(preset)))
        .merge(layers)
        .extract()
        .map_err(|e| Error::Config(e.to_string()))?;
    validate_against_schema(&serde_json::to_value(&cfg)?)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn published_schema_is_current() {
        let published: serde_json::Value = serde_json::from_str(PUBLISHED_SCHEMA).unwrap();
        if published != schema() {
            if std::env::var_os("UPDATE_SCHEMA").is_some() {
                let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/run_config.schema.json");
                std::fs::write(path, serde_json::to_string_pretty(&schema()).unwrap() + "\n").unwrap();
            }
            panic!("schema/run_config.schema.json is stale; rerun with UPDATE_SCHEMA=1");
        }
    }

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        validate_against_schema(&serde_json::to_value(&cfg).unwrap()).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_fail_schema() {
        assert!(validate_against_schema(&json!({"model": {"widht": 3}})).is_err());
        assert!(validate_against_schema(&json!({"seed": -1})).is_err());
    }

    #[test]
    fn preset_selects_model_defaults_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"model": {"preset": "test"}, "seed": 3, "train": {"epochs": 7}}"#).unwrap();
        let cfg = load(Some(&path), "DOCMSU_UNIT_NONE_", &json!({"seed": 9})).unwrap();
        assert_eq!(cfg.model, ModelConfig::test());
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model_config().seed, 9);
    }

    #[test]
    fn environment_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"epochs": 7}}"#).unwrap();
        // a prefix unique to this test keeps it independent of the others
        std::env::set_var("DOCMSU_UNIT_ENV_TRAIN__EPOCHS", "2");
        let cfg = load(Some(&path), "DOCMSU_UNIT_ENV_", &json!({})).unwrap();
        std::env::remove_var("DOCMSU_UNIT_ENV_TRAIN__EPOCHS");
        assert_eq!(cfg.train.epochs, 2);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = load(Some(Path::new("/nonexistent/c.json")), ENV_PREFIX, &json!({})).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
