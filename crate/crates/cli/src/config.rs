//! The CLI's JSON config document and `--set` overrides.

use std::fs;
use std::path::Path;

use dualseg_core::{SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub schema_version: u32,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckSettings,
    pub outputs: OutputPaths,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: SynthConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradcheckSettings::default(),
            outputs: OutputPaths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates per check.
    pub coordinates: usize,
    /// Random inputs per check.
    pub trials: usize,
    pub frames: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            coordinates: 200,
            trials: 10,
            frames: 24,
            num_classes: 3,
            seed: 0,
        }
    }
}

/// File names, relative to the command's `--out` directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub manifest: String,
    pub checkpoint: String,
    pub runlog: String,
    pub metrics: String,
    pub predictions: String,
    pub ablation_csv: String,
    pub ablation_json: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            manifest: "manifest.json".into(),
            checkpoint: "checkpoint.bin".into(),
            runlog: "runlog.json".into(),
            metrics: "metrics.csv".into(),
            predictions: "predictions".into(),
            ablation_csv: "ablation.csv".into(),
            ablation_json: "ablation.json".into(),
        }
    }
}

const ROOT_KEYS: [&str; 5] = ["schema_version", "data", "train", "gradcheck", "outputs"];

impl CliConfig {
    /// Reads `path` (defaults when absent) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        // fill in defaults so that overrides can address any documented key
        let base: CliConfig =
            serde_json::from_value(doc.clone()).map_err(|e| CliError::config(e.to_string()))?;
        let mut full = serde_json::to_value(&base).expect("config serializes");
        merge(&mut full, &doc);
        doc = full;
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let cfg: CliConfig =
            serde_json::from_value(doc).map_err(|e| CliError::config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "`schema_version`: expected {SCHEMA_VERSION}, got {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// `key=value` with a dotted key. Keys not starting with a top-level section
/// are taken relative to `train`, so `loss.lambda_S=0` means
/// `train.loss.lambda_S=0`. Values are parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(doc: &mut Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let mut path: Vec<&str> = key.split('.').collect();
    if !ROOT_KEYS.contains(&path[0]) {
        path.insert(0, "train");
    }
    let value = serde_json::from_str::<Value>(raw.trim())
        .unwrap_or_else(|_| Value::String(raw.trim().to_owned()));
    let mut slot = &mut *doc;
    for (depth, part) in path.iter().enumerate() {
        slot = match slot {
            Value::Object(map) => map.get_mut(*part),
            _ => None,
        }
        .ok_or_else(|| {
            CliError::config(format!("unknown config key `{}`", path[..=depth].join(".")))
        })?;
    }
    *slot = value;
    Ok(())
}
