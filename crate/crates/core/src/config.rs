//! Run configuration: a TOML file plus `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{DatasetSpec, TASK_CLASS, TASK_COUNT, TASK_DIST};
use crate::error::{Error, Result};
use crate::eval::{FeatureKind, ProbeConfig};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Pretraining (and default evaluation) dataset, e.g. `synth:seed=0,count=2000`.
    pub spec: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: "synth:seed=0,count=2000,size=32".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tasks: Vec<String>,
    pub feature: FeatureKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: [TASK_CLASS, TASK_COUNT, TASK_DIST].map(String::from).to_vec(),
            feature: FeatureKind::Cls,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, then validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg = Self::load(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`RunConfig::resolve`] without the final validation.
    ///
    /// Override keys are dotted paths (`train.crop.scale_lo`) or a bare field
    /// name that occurs exactly once in the config tree (`mask_ratio`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let defaults = Value::try_from(RunConfig::default()).expect("default config serializes");
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.as_str(), "override must look like key=value"))?;
            let key = key.trim();
            let path = resolve_key(&defaults, key)?;
            set_path(&mut table, &path, parse_value(raw.trim()))?;
        }
        Table::try_into(table).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        let spec = self.dataset()?;
        spec.validate(self.model.patch_size)?;
        if spec.image_size != self.model.image_size {
            return Err(Error::config(
                "data.spec",
                format!("{}px images for a {}px model", spec.image_size, self.model.image_size),
            ));
        }
        if self.eval.tasks.is_empty() {
            return Err(Error::config("eval.tasks", "must name at least one task"));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        self.data.spec.parse().map_err(|e: Error| match e {
            Error::InvalidConfig { message, .. } => Error::config("data.spec", message),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the snapshot that reproduces this run when fed back via `--config`.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(SNAPSHOT_FILE);
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))
    }
}

/// TOML literal when it parses as one, bare string otherwise.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Table(t) = v {
        for (k, child) in t {
            prefix.push(k.clone());
            out.push(prefix.clone());
            leaf_paths(child, prefix, out);
            prefix.pop();
        }
    }
}

fn resolve_key(defaults: &Value, key: &str) -> Result<Vec<String>> {
    if key.is_empty() {
        return Err(Error::config("override", "empty key"));
    }
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    let mut all = Vec::new();
    leaf_paths(defaults, &mut Vec::new(), &mut all);
    if parts.len() > 1 {
        return if all.contains(&parts) {
            Ok(parts)
        } else {
            Err(Error::config(key, "unknown configuration key"))
        };
    }
    let hits: Vec<&Vec<String>> = all.iter().filter(|p| p.last() == Some(&parts[0])).collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::config(key, "unknown configuration key")),
        many => {
            let names: Vec<String> = many.iter().map(|p| p.join(".")).collect();
            Err(Error::config(key, format!("ambiguous key; use one of {}", names.join(", "))))
        }
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path.join("."), format!("`{p}` is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
