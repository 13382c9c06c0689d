//! Experiment configuration: one TOML file with `[model]`, `[train]` and
//! `[data]` tables, plus `section.key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::MoEConfig;
use crate::training::{DataConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub model: MoEConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

const SECTIONS: [&str; 3] = ["model", "train", "data"];

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Seeds both the initialization and the data order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies one `section.key=value` override to a raw table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::config(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let (section, field) = key.split_once('.').ok_or_else(|| {
        LabError::config(
            key,
            format!("override key needs a section prefix, one of {}", SECTIONS.join(", ")),
        )
    })?;
    if !SECTIONS.contains(&section) {
        return Err(LabError::config(
            key,
            format!("unknown section, expected one of {}", SECTIONS.join(", ")),
        ));
    }
    let sub = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sub = sub
        .as_table_mut()
        .ok_or_else(|| LabError::config(section, "must be a table"))?;
    sub.insert(field.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn decode(table: toml::Table, origin: &str) -> Result<LabConfig> {
    let cfg: LabConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| LabError::config(origin, e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (defaults when `None`), applies overrides in order, validates.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<LabConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| LabError::config(p.display().to_string(), format!("cannot read: {e}")))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| LabError::config(p.display().to_string(), e.message().to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let origin = path.map_or_else(|| "config".to_string(), |p| p.display().to_string());
    decode(table, &origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RouterKind;

    #[test]
    fn defaults_without_file() {
        assert_eq!(resolve(None, &[]).unwrap(), LabConfig::default());
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = resolve(
            None,
            &[
                "model.router=topk".into(),
                "train.lr_peak=3e-3".into(),
                "model.d_ffn=64".into(),
                "train.regularizer=l1".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.router, RouterKind::Topk);
        assert_eq!(c.train.lr_peak, 3e-3);
        assert_eq!(c.model.d_ffn, Some(64));
    }

    #[test]
    fn field_level_errors() {
        let err = resolve(None, &["model.nope=1".into()]).unwrap_err();
        assert!(matches!(err, LabError::Config { .. }));
        assert!(err.to_string().contains("nope"), "{err}");
        let err = resolve(None, &["train.lambda0=0".into()]).unwrap_err();
        assert!(err.to_string().contains("train.lambda0"), "{err}");
        assert!(resolve(None, &["router=topk".into()]).is_err());
        assert!(resolve(Some(Path::new("/no/such/file.toml")), &[]).is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[model]\nn_layers = 2\n[train]\nsteps = 10\n").unwrap();
        let c = resolve(Some(&p), &["train.steps=20".into()]).unwrap();
        assert_eq!((c.model.n_layers, c.train.steps), (2, 20));
    }
}
