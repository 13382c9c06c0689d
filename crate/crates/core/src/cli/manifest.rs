use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::LabConfig;
use crate::error::{LabError, Result};

/// One setting compared with the reference-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityFlag {
    pub field: String,
    pub value: String,
    pub reference: String,
    /// True when the run uses the reference value.
    pub reference_default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub start_time: u64,
    pub config: LabConfig,
    pub fidelity: Vec<FidelityFlag>,
}

fn flag(field: &str, value: impl ToString, reference: impl ToString) -> FidelityFlag {
    let (value, reference) = (value.to_string(), reference.to_string());
    FidelityFlag {
        field: field.into(),
        reference_default: value == reference,
        value,
        reference,
    }
}

/// Reference-scale values beside the resolved ones.
pub fn fidelity_flags(c: &LabConfig) -> Vec<FidelityFlag> {
    let m = &c.model;
    let t = &c.train;
    vec![
        flag("model.d_model", m.d_model, 768),
        flag("model.n_layers", m.n_layers, 12),
        flag("model.n_heads", m.n_heads, 12),
        flag("model.n_groups", m.n_groups, 4),
        flag("model.context_len", m.context_len, 1024),
        flag("model.vocab_size", m.vocab_size, "bpe"),
        flag("model.n_experts", m.n_experts, 8),
        flag("model.top_k", m.top_k, 1),
        flag("model.granularity", m.granularity, 1),
        flag("train.batch_size", t.batch_size, 512),
        flag("train.steps", t.steps, 60_000),
        flag("train.lr_peak", t.lr_peak, 5e-4),
        flag("train.beta1", t.beta1, 0.9),
        flag("train.beta2", t.beta2, 0.999),
        flag("train.lb_weight", t.lb_weight, 0.01),
        flag("train.lambda0", t.lambda0, 1e-8),
        flag("train.alpha", t.alpha, 1.2),
        flag("train.regularizer", format!("{:?}", t.regularizer), "L1Lb"),
        flag(
            "data.sources",
            if c.data.sources.is_empty() {
                "synthetic"
            } else {
                "files"
            },
            "large web corpus",
        ),
    ]
}

impl RunManifest {
    pub fn new(command: &str, config: &LabConfig) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.train.seed,
            start_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config: config.clone(),
            fidelity: fidelity_flags(config),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| LabError::Invariant(e.to_string()))?;
        fs::write(&path, text).map_err(|e| LabError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::Format {
            path,
            reason: e.to_string(),
        })
    }
}
