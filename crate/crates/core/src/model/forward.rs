use super::ffn::{swiglu, SwiGluVars};
use super::params::{FfnParams, ModelParams};
use crate::autodiff::{AttentionDims, RopeDims, Tape, Var};
use crate::error::{LabError, Result};
use crate::routing::{
    moe_forward, route_constant, route_hash, route_relu, route_topk, ExpertPath, RouterDecision, RouterKind,
};

/// `batch × seq` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(LabError::Input(format!(
                "{} token ids for a {batch}x{seq} batch",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(LabError::Input("ragged token rows".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn tokens(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub expert_path: Option<ExpertPath>,
    /// Replaces `top_k` for TopK routing (near-dense warmup).
    pub top_k: Option<usize>,
    /// Pins every gate to a constant instead of routing.
    pub fixed_gate: Option<f64>,
}

pub struct ForwardOutput {
    /// `[batch·seq × vocab]` logits, rows in batch-major order.
    pub logits: Var,
    /// One decision per MoE layer.
    pub decisions: Vec<RouterDecision>,
    /// Parameter leaves in [`ModelParams::named`] order.
    pub param_vars: Vec<Var>,
}

/// Causal forward pass. Records everything on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    tokens: &TokenBatch,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if tokens.seq > cfg.context_len {
        return Err(LabError::Input(format!(
            "sequence length {} exceeds context {}",
            tokens.seq, cfg.context_len
        )));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(LabError::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let n = tokens.tokens();
    let path = opts.expert_path.unwrap_or(cfg.expert_path);
    let mut param_vars = Vec::new();
    let mut reg = |tape: &mut Tape, t: &crate::autodiff::Tensor| {
        let v = tape.param(t.clone());
        param_vars.push(v);
        v
    };

    let embed = reg(tape, &params.embed);
    let mut x = tape.embedding(embed, &tokens.ids)?;
    let attn = AttentionDims {
        batch: tokens.batch,
        seq: tokens.seq,
        heads: cfg.n_heads,
        kv_heads: cfg.n_groups,
        head_dim: cfg.head_dim(),
    };
    let rope_q = RopeDims {
        seq: tokens.seq,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        base: cfg.rope_base,
    };
    let rope_k = RopeDims {
        heads: cfg.n_groups,
        ..rope_q
    };
    let mut decisions = Vec::new();

    for layer in &params.layers {
        let attn_norm = reg(tape, &layer.attn_norm);
        let wq = reg(tape, &layer.wq);
        let wk = reg(tape, &layer.wk);
        let wv = reg(tape, &layer.wv);
        let wo = reg(tape, &layer.wo);
        let ffn_norm = reg(tape, &layer.ffn_norm);

        let h = tape.rms_norm(x, attn_norm, cfg.norm_eps)?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let q = tape.rope(q, rope_q)?;
        let k = tape.rope(k, rope_k)?;
        let a = tape.causal_attention(q, k, v, attn)?;
        let o = tape.matmul(a, wo)?;
        x = tape.add(x, o)?;

        let h = tape.rms_norm(x, ffn_norm, cfg.norm_eps)?;
        let y = match &layer.ffn {
            FfnParams::Dense(f) => {
                let vars = SwiGluVars {
                    gate: reg(tape, &f.gate),
                    up: reg(tape, &f.up),
                    down: reg(tape, &f.down),
                };
                swiglu(tape, h, &vars)?
            }
            FfnParams::Moe { router, experts } => {
                let router_var = router.as_ref().map(|r| reg(tape, &r.weight));
                let expert_vars: Vec<SwiGluVars> = experts
                    .iter()
                    .map(|f| SwiGluVars {
                        gate: reg(tape, &f.gate),
                        up: reg(tape, &f.up),
                        down: reg(tape, &f.down),
                    })
                    .collect();
                let decision = if let Some(g) = opts.fixed_gate {
                    route_constant(tape, n, experts.len(), g)
                } else {
                    match (cfg.router, router_var) {
                        (RouterKind::Relu, Some(w)) => route_relu(tape, h, w)?,
                        (RouterKind::Topk, Some(w)) => {
                            let k = opts.top_k.unwrap_or(cfg.top_k) * cfg.granularity;
                            route_topk(tape, h, w, k)?
                        }
                        (RouterKind::Hash, _) => route_hash(tape, &tokens.ids, experts.len(), cfg.top_k)?,
                        (kind, _) => {
                            return Err(LabError::Invariant(format!(
                                "router {} without matching parameters",
                                kind.as_str()
                            )))
                        }
                    }
                };
                let y = moe_forward(tape, h, &decision, &expert_vars, path)?;
                decisions.push(decision);
                y
            }
        };
        x = tape.add(x, y)?;
    }
    let final_norm = reg(tape, &params.final_norm);
    let lm_head = reg(tape, &params.lm_head);
    let h = tape.rms_norm(x, final_norm, cfg.norm_eps)?;
    let logits = tape.matmul(h, lm_head)?;
    Ok(ForwardOutput {
        logits,
        decisions,
        param_vars,
    })
}

/// Mean next-token cross entropy; `targets` align row-for-row with `logits`.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}
