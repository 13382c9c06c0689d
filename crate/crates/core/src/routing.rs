//! Routers and the mixture-of-experts combine step.
//!
//! Three gate functions produce a [`RouterDecision`] for a `[T × E′]`
//! block of tokens: TopK over a softmax, ReLU over the raw logits, and a
//! fixed `token mod E` hash. [`moe_forward`] then mixes the expert outputs
//! with those gate values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{LabError, Result};
use crate::model::ffn::{swiglu, SwiGluVars};

/// Which feed-forward block a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Topk,
    Relu,
    Hash,
    Dense,
    #[serde(rename = "dense_xE", alias = "dense_xe")]
    DenseXE,
}

impl RouterKind {
    pub fn is_moe(self) -> bool {
        matches!(self, RouterKind::Topk | RouterKind::Relu | RouterKind::Hash)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RouterKind::Topk => "topk",
            RouterKind::Relu => "relu",
            RouterKind::Hash => "hash",
            RouterKind::Dense => "dense",
            RouterKind::DenseXE => "dense_xE",
        }
    }
}

/// How expert outputs are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPath {
    /// Every expert runs on every token; gates of zero mask the result.
    #[default]
    DenseMasked,
    /// Each expert only sees the tokens it is active for.
    Sparse,
}

/// Router weight matrix `W` of shape `[d × E′]`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub weight: Tensor,
}

impl RouterParams {
    pub const INIT_STD: f64 = 0.02;

    pub fn init<R: Rng + ?Sized>(d_model: usize, experts: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_model, experts], Self::INIT_STD, rng),
        }
    }
}

/// Gate values for one layer and one batch, plus their active pattern.
#[derive(Debug, Clone)]
pub struct RouterDecision {
    /// `[T × E′]` gate values on the tape.
    pub weights: Var,
    /// Softmax probabilities feeding a TopK gate.
    pub probs: Option<Var>,
    /// Row-major `[T × E′]`, true where the gate is strictly positive.
    pub active_mask: Vec<bool>,
    pub tokens: usize,
    pub experts: usize,
    pub tokens_per_expert: Vec<usize>,
    pub batch_sparsity: f64,
}

impl RouterDecision {
    /// Derives the mask and counts from gate values already on `tape`.
    pub fn from_weights(tape: &Tape, weights: Var, probs: Option<Var>) -> Self {
        let t = tape.value(weights);
        let (tokens, experts) = (t.rows(), t.cols());
        let active_mask = tape.indicator_mask(weights);
        let mut tokens_per_expert = vec![0; experts];
        for row in active_mask.chunks(experts.max(1)) {
            for (c, &a) in tokens_per_expert.iter_mut().zip(row) {
                *c += usize::from(a);
            }
        }
        let active: usize = tokens_per_expert.iter().sum();
        let slots = (tokens * experts).max(1);
        Self {
            weights,
            probs,
            active_mask,
            tokens,
            experts,
            tokens_per_expert,
            batch_sparsity: 1.0 - active as f64 / slots as f64,
        }
    }

    pub fn is_active(&self, token: usize, expert: usize) -> bool {
        self.active_mask[token * self.experts + expert]
    }

    pub fn active_count(&self) -> usize {
        self.tokens_per_expert.iter().sum()
    }

    pub fn row_active(&self, token: usize) -> usize {
        self.active_mask[token * self.experts..(token + 1) * self.experts]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    /// Tokens routed to `expert`, in ascending order.
    pub fn expert_tokens(&self, expert: usize) -> Vec<usize> {
        (0..self.tokens).filter(|&t| self.is_active(t, expert)).collect()
    }
}

/// Indices of the `k` largest entries; ties keep the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// `TopK(Softmax(xW), k)` with no renormalization of the survivors.
pub fn route_topk(tape: &mut Tape, x: Var, weight: Var, k: usize) -> Result<RouterDecision> {
    let experts = tape.shape(weight).last().copied().unwrap_or(0);
    if k == 0 || k > experts {
        return Err(LabError::config("top_k", format!("k={k} outside 1..={experts}")));
    }
    let logits = tape.matmul(x, weight)?;
    let probs = tape.softmax_rows(logits);
    let p = tape.value(probs);
    let tokens = p.rows();
    let mut keep = vec![0.0; tokens * experts];
    for t in 0..tokens {
        for e in topk_indices(p.row(t), k) {
            keep[t * experts + e] = 1.0;
        }
    }
    let keep = tape.constant(Tensor::new(vec![tokens, experts], keep)?);
    let weights = tape.mul(probs, keep)?;
    Ok(RouterDecision::from_weights(tape, weights, Some(probs)))
}

/// `ReLU(xW)`.
pub fn route_relu(tape: &mut Tape, x: Var, weight: Var) -> Result<RouterDecision> {
    let logits = tape.matmul(x, weight)?;
    let weights = tape.relu(logits);
    Ok(RouterDecision::from_weights(tape, weights, None))
}

/// Non-trainable `token_id mod E` routing with unit gates.
pub fn route_hash(tape: &mut Tape, token_ids: &[usize], experts: usize, k: usize) -> Result<RouterDecision> {
    if k != 1 {
        return Err(LabError::config(
            "top_k",
            format!("hash routing supports k=1 only, got {k}"),
        ));
    }
    if experts == 0 {
        return Err(LabError::config("n_experts", "must be positive"));
    }
    let mut w = vec![0.0; token_ids.len() * experts];
    for (t, &id) in token_ids.iter().enumerate() {
        w[t * experts + id % experts] = 1.0;
    }
    let weights = tape.constant(Tensor::new(vec![token_ids.len(), experts], w)?);
    Ok(RouterDecision::from_weights(tape, weights, None))
}

/// Every gate pinned to `value`.
pub fn route_constant(tape: &mut Tape, tokens: usize, experts: usize, value: f64) -> RouterDecision {
    let weights = tape.constant(Tensor::filled(&[tokens, experts], value));
    RouterDecision::from_weights(tape, weights, None)
}

/// `y_t = Σ_e R(x_t)_e · FFN_e(x_t)`.
pub fn moe_forward(
    tape: &mut Tape,
    x: Var,
    decision: &RouterDecision,
    experts: &[SwiGluVars],
    path: ExpertPath,
) -> Result<Var> {
    if experts.len() != decision.experts {
        return Err(LabError::config(
            "n_experts",
            format!("{} expert blocks for {} gate columns", experts.len(), decision.experts),
        ));
    }
    let (tokens, d) = (tape.value(x).rows(), tape.value(x).cols());
    if tokens != decision.tokens {
        return Err(LabError::Shape {
            op: "moe_forward",
            left: tape.shape(x).to_vec(),
            right: vec![decision.tokens, decision.experts],
        });
    }
    let mut y: Option<Var> = None;
    for (e, expert) in experts.iter().enumerate() {
        let gate = tape.column(decision.weights, e)?;
        let part = match path {
            ExpertPath::DenseMasked => {
                let h = swiglu(tape, x, expert)?;
                tape.mul_rows(h, gate)?
            }
            ExpertPath::Sparse => {
                let idx = decision.expert_tokens(e);
                if idx.is_empty() {
                    continue;
                }
                let xs = tape.gather_rows(x, &idx)?;
                let gs = tape.gather_rows(gate, &idx)?;
                let h = swiglu(tape, xs, expert)?;
                let scaled = tape.mul_rows(h, gs)?;
                tape.scatter_add_rows(scaled, &idx, tokens)?
            }
        };
        y = Some(match y {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    Ok(match y {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(&[tokens, d])),
    })
}
