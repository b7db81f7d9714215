//! Experiment configuration: JSON file, `SUML_SEED`, then dotted-path
//! overrides, in increasing precedence. Absent keys take defaults; unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::WorldSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelSpec;
use crate::pipeline::TrainConfig;
use crate::seed::{split_seed, Stream};

pub const SEED_ENV: &str = "SUML_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_fpv_train: usize,
    pub n_fpv_test: usize,
    pub n_tpv_train: usize,
    pub n_tpv_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_fpv_train: 96,
            n_fpv_test: 960,
            n_tpv_train: 480,
            n_tpv_test: 240,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// The world spec with its seed derived from the experiment seed.
    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: split_seed(self.train.seed, Stream::World),
            ..self.world.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.n_fpv_train < 2 || d.n_tpv_train < 1 || d.n_fpv_test < 1 || d.n_tpv_test < 1 {
            return Err(Error::Config(
                "data sizes must be positive and n_fpv_train >= 2".into(),
            ));
        }
        if self.model.hidden_dim == 0 {
            return Err(Error::Config("model.hidden_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds a validated config from a JSON value with the same layering
    /// as [`parse_config`].
    pub fn from_value(
        file: &Value,
        env_seed: Option<u64>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut merged = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
        merge_into(&mut merged, file, "")?;
        if let Some(seed) = env_seed {
            merged["train"]["seed"] = Value::from(seed);
        }
        for (key, raw) in overrides {
            apply_override(&mut merged, key, raw)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            Error::Config(format!("at `{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads `path`, applies `SUML_SEED` from the environment and the
/// `key.path=value` overrides, validates.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => Value::Object(Default::default()),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not a u64")))?,
        ),
        Err(_) => None,
    };
    ExperimentConfig::from_value(&file, env_seed, overrides)
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Objects merge key by key; anything else replaces the default wholesale.
fn merge_into(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = join(path, k);
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_into(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("unknown key `{here}`"))),
                }
            }
            Ok(())
        }
        (_, _) if path.is_empty() => Err(Error::Config("config root must be a JSON object".into())),
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("override `{key}` does not name a config key")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Splits `a.b=value` into its key and value.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
