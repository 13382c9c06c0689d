use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::MoEConfig;
use super::ffn::SwiGluParams;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::routing::{RouterKind, RouterParams};

#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams {
    Dense(SwiGluParams),
    Moe {
        /// Absent for hash routing.
        router: Option<RouterParams>,
        experts: Vec<SwiGluParams>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: MoEConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl ModelParams {
    /// Seeded initialization: N(0, init_std) matrices, unit norm gains.
    pub fn init(config: &MoEConfig) -> Result<Self> {
        config.validate()?;
        let config = config.clone().resolved();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let std = config.init_std;
        let embed = Tensor::randn(&[config.vocab_size, d], std, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = Tensor::randn(&[d, d], std, &mut rng);
            let wk = Tensor::randn(&[d, config.kv_dim()], std, &mut rng);
            let wv = Tensor::randn(&[d, config.kv_dim()], std, &mut rng);
            let wo = Tensor::randn(&[d, d], std, &mut rng);
            let ffn = if config.router.is_moe() {
                let router =
                    (config.router != RouterKind::Hash).then(|| RouterParams::init(d, config.expert_count(), &mut rng));
                let experts = (0..config.expert_count())
                    .map(|_| SwiGluParams::init(d, config.expert_hidden(), std, &mut rng))
                    .collect();
                FfnParams::Moe { router, experts }
            } else {
                FfnParams::Dense(SwiGluParams::init(d, config.dense_hidden(), std, &mut rng))
            };
            layers.push(LayerParams {
                attn_norm: Tensor::filled(&[d], 1.0),
                wq,
                wk,
                wv,
                wo,
                ffn_norm: Tensor::filled(&[d], 1.0),
                ffn,
            });
        }
        let final_norm = Tensor::filled(&[d], 1.0);
        let lm_head = Tensor::randn(&[d, config.vocab_size], std, &mut rng);
        Ok(Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Every parameter tensor with a stable dotted name, in registration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("attn_norm"), &layer.attn_norm));
            out.push((p("wq"), &layer.wq));
            out.push((p("wk"), &layer.wk));
            out.push((p("wv"), &layer.wv));
            out.push((p("wo"), &layer.wo));
            out.push((p("ffn_norm"), &layer.ffn_norm));
            match &layer.ffn {
                FfnParams::Dense(f) => {
                    out.push((p("ffn.gate"), &f.gate));
                    out.push((p("ffn.up"), &f.up));
                    out.push((p("ffn.down"), &f.down));
                }
                FfnParams::Moe { router, experts } => {
                    if let Some(r) = router {
                        out.push((p("router"), &r.weight));
                    }
                    for (e, f) in experts.iter().enumerate() {
                        out.push((p(&format!("experts.{e}.gate")), &f.gate));
                        out.push((p(&format!("experts.{e}.up")), &f.up));
                        out.push((p(&format!("experts.{e}.down")), &f.down));
                    }
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.ffn_norm);
            match &mut layer.ffn {
                FfnParams::Dense(f) => {
                    out.push(&mut f.gate);
                    out.push(&mut f.up);
                    out.push(&mut f.down);
                }
                FfnParams::Moe { router, experts } => {
                    if let Some(r) = router {
                        out.push(&mut r.weight);
                    }
                    for f in experts {
                        out.push(&mut f.gate);
                        out.push(&mut f.up);
                        out.push(&mut f.down);
                    }
                }
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}
