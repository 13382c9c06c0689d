use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::regularization::RegularizerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Linear LR warmup length; 1% of `steps` when unset.
    pub lr_warmup_steps: Option<usize>,
    pub min_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Switch balance-loss weight for TopK routers.
    pub lb_weight: f64,
    /// Multiplier on the balance loss; `E′` when unset.
    pub switch_scale: Option<f64>,
    pub lambda0: f64,
    pub alpha: f64,
    pub regularizer: RegularizerKind,
    /// TopK runs use `topk_warmup_k` experts for this many initial steps.
    pub topk_warmup_steps: usize,
    /// `E` when unset.
    pub topk_warmup_k: Option<usize>,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub seed: u64,
    pub stage_band: f64,
    pub stage_window: usize,
    /// Trailing share of steps aggregated into the token profile.
    pub profile_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_peak: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            lr_warmup_steps: None,
            min_lr_fraction: 0.1,
            grad_clip: 1.0,
            lb_weight: 0.01,
            switch_scale: None,
            lambda0: 1e-8,
            alpha: 1.2,
            regularizer: RegularizerKind::L1Lb,
            topk_warmup_steps: 0,
            topk_warmup_k: None,
            eval_every: 100,
            eval_batches: 4,
            seed: 0,
            stage_band: 0.03,
            stage_window: 20,
            profile_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        self.lr_warmup_steps.unwrap_or(self.steps / 100)
    }

    /// First step whose routing feeds the token profile.
    pub fn profile_start(&self) -> usize {
        let tail = (self.steps as f64 * self.profile_fraction).ceil() as usize;
        self.steps.saturating_sub(tail)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_batches", self.eval_batches),
            ("stage_window", self.stage_window),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(LabError::config(format!("train.{field}"), "must be positive"));
            }
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return Err(LabError::config(
                "train.lr_peak",
                format!("must be > 0 (got {})", self.lr_peak),
            ));
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(LabError::config(
                    format!("train.{field}"),
                    format!("must lie in [0, 1) (got {v})"),
                ));
            }
        }
        let nonneg = [
            ("adam_eps", self.adam_eps),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("lb_weight", self.lb_weight),
            ("stage_band", self.stage_band),
        ];
        for (field, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::config(
                    format!("train.{field}"),
                    format!("must be finite and >= 0 (got {v})"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(LabError::config("train.min_lr_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.profile_fraction) {
            return Err(LabError::config("train.profile_fraction", "must lie in [0, 1]"));
        }
        if self.warmup_steps() >= self.steps {
            return Err(LabError::config(
                "train.lr_warmup_steps",
                "must be shorter than the run",
            ));
        }
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0) {
            return Err(LabError::config(
                "train.lambda0",
                format!(
                    "must be finite and > 0 (got {}); a zero coefficient can never grow",
                    self.lambda0
                ),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 1.0) {
            return Err(LabError::config(
                "train.alpha",
                format!("must be > 1 (got {})", self.alpha),
            ));
        }
        if self.topk_warmup_k == Some(0) {
            return Err(LabError::config("train.topk_warmup_k", "must be positive"));
        }
        Ok(())
    }
}

/// Where training text comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Files read as raw bytes, one domain per file. Empty selects the synthetic corpus.
    pub sources: Vec<PathBuf>,
    /// Bytes generated per synthetic domain.
    pub synthetic_bytes: usize,
    pub valid_fraction: f64,
    /// Round-robin domains inside each training batch instead of a plain shuffle.
    pub balanced: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            synthetic_bytes: 200_000,
            valid_fraction: 0.1,
            balanced: true,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(LabError::config("data.valid_fraction", "must lie in (0, 1)"));
        }
        if self.sources.is_empty() && self.synthetic_bytes == 0 {
            return Err(LabError::config(
                "data.synthetic_bytes",
                "must be positive without sources",
            ));
        }
        Ok(())
    }
}
