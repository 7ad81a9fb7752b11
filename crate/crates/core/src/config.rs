//! Run configuration: a strict JSON document plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::trainer::{OptimConfig, PhasePlan};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "COREBERT_OUTPUT_ROOT";

/// Model shape; the vocabulary size comes from the data and the mode from the plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    #[serde(default)]
    pub ffn_inner: Option<usize>,
    pub factor_rank: usize,
    pub anchors: usize,
    pub max_seq_len: usize,
}

impl ModelSection {
    pub fn desk() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn_inner: None,
            factor_rank: 16,
            anchors: 8,
            max_seq_len: 128,
        }
    }

    pub fn to_config(&self, vocab_size: usize, mode: Mode, seed: u64) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_inner: self.ffn_inner,
            factor_rank: self.factor_rank,
            anchors: self.anchors,
            max_seq_len: self.max_seq_len,
            vocab_size,
            mode,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub plan: PhasePlan,
    #[serde(default)]
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Held-out evaluation period in steps; 0 evaluates only around the switch and at the end.
    #[serde(default)]
    pub eval_every: u64,
}

impl RunConfig {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    /// Checks every constraint that does not depend on the corpus.
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.optim.validate()?;
        // Vocabulary size is unknown until the corpus is read; any positive value suffices here.
        self.model.to_config(1, Mode::Relaxed, self.seed).validate()?;
        if self.data.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be at least 1".into()));
        }
        if !(self.data.mask_rate > 0.0 && self.data.mask_rate <= 1.0) {
            return Err(Error::Config(format!(
                "data.mask_rate {} must lie in (0, 1]",
                self.data.mask_rate
            )));
        }
        if !(self.data.heldout_fraction > 0.0 && self.data.heldout_fraction < 1.0) {
            return Err(Error::Config("data.heldout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// `output_dir`, placed under the output-root environment variable when it is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON and taken as a string otherwise.
/// Every path component must already exist.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override key {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) && !optional_key(&parts) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        if !obj.contains_key(*part) {
            if !optional_key(&parts) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), Value::Object(Default::default()));
        }
        node = obj.get_mut(*part).expect("present or just inserted");
    }
    unreachable!("split always yields at least one part")
}

/// Keys with defaults that may be absent from a document yet still be overridden.
fn optional_key(parts: &[&str]) -> bool {
    matches!(
        parts,
        ["eval_every"]
            | ["optim", _]
            | ["plan", "rewarm_fraction"]
            | ["model", "ffn_inner"]
            | [
                "data",
                "vocab_cap" | "batch_size" | "mask_rate" | "heldout_fraction" | "eval_batches"
            ]
    )
}
