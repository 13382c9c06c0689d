use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::routing::{ExpertPath, RouterKind};

/// Architecture of the decoder-only transformer and its MoE layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoEConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value head groups for grouped-query attention.
    pub n_groups: usize,
    /// FFN intermediate size; `4 · d_model` when unset.
    pub d_ffn: Option<usize>,
    pub n_experts: usize,
    pub top_k: usize,
    /// Each expert is split into this many experts of size `d_ffn / G`.
    pub granularity: usize,
    pub router: RouterKind,
    pub context_len: usize,
    pub seed: u64,
    pub expert_path: ExpertPath,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_groups: 2,
            d_ffn: None,
            n_experts: 8,
            top_k: 1,
            granularity: 1,
            router: RouterKind::Relu,
            context_len: 256,
            seed: 0,
            expert_path: ExpertPath::DenseMasked,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl MoEConfig {
    /// Fills derived defaults in place (currently `d_ffn`).
    pub fn resolved(mut self) -> Self {
        self.d_ffn = Some(self.d_ffn());
        self
    }

    pub fn d_ffn(&self) -> usize {
        self.d_ffn.unwrap_or(4 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_groups * self.head_dim()
    }

    /// `E′ = E · G` routed experts per layer.
    pub fn expert_count(&self) -> usize {
        self.n_experts * self.granularity
    }

    /// Intermediate size of one routed expert.
    pub fn expert_hidden(&self) -> usize {
        self.d_ffn() / self.granularity
    }

    /// Active experts per token at the compute budget: `k · G`.
    pub fn active_slots(&self) -> usize {
        self.top_k * self.granularity
    }

    /// `1 − k/E`, unchanged by granularity.
    pub fn target_sparsity(&self) -> f64 {
        1.0 - self.top_k as f64 / self.n_experts as f64
    }

    /// Intermediate size of the dense FFN in the dense baselines.
    pub fn dense_hidden(&self) -> usize {
        match self.router {
            RouterKind::DenseXE => self.d_ffn() * self.n_experts,
            _ => self.d_ffn(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_groups", self.n_groups),
            ("d_ffn", self.d_ffn()),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("granularity", self.granularity),
            ("context_len", self.context_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(LabError::config(format!("model.{field}"), "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LabError::config(
                "model.n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_groups) {
            return Err(LabError::config(
                "model.n_groups",
                format!("n_heads {} not divisible by n_groups {}", self.n_heads, self.n_groups),
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(LabError::config(
                "model.n_heads",
                format!("rotary embedding needs an even head dim, got {}", self.head_dim()),
            ));
        }
        if !self.d_ffn().is_multiple_of(self.granularity) {
            return Err(LabError::config(
                "model.granularity",
                format!(
                    "d_ffn {} not divisible by granularity {}",
                    self.d_ffn(),
                    self.granularity
                ),
            ));
        }
        if self.top_k > self.n_experts {
            return Err(LabError::config(
                "model.top_k",
                format!("top_k {} exceeds n_experts {}", self.top_k, self.n_experts),
            ));
        }
        if self.router == RouterKind::Hash && (self.top_k != 1 || self.granularity != 1) {
            return Err(LabError::config("model.router", "hash routing supports k=1, G=1 only"));
        }
        for (field, v) in [
            ("rope_base", self.rope_base),
            ("norm_eps", self.norm_eps),
            ("init_std", self.init_std),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(LabError::config(
                    format!("model.{field}"),
                    "must be finite and positive",
                ));
            }
        }
        Ok(())
    }
}
