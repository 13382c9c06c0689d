//! Central finite-difference checks of the tape's gradients.
//!
//! Every case reduces its output to a scalar with a fixed random probe,
//! `L = Σ out ⊙ P`, so each output entry contributes a distinct weight.
//! Relative error is `|a − n| / max(|a|, |n|, 1e-4)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionDims, RopeDims, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{forward, lm_loss, ForwardOptions, MoEConfig, ModelParams, SwiGluVars, TokenBatch};
use crate::regularization::{l1_reg, l1_reg_lb, switch_lb_loss};
use crate::routing::{moe_forward, route_relu, route_topk, ExpertPath, RouterDecision, RouterKind};

pub const STEP: f64 = 1e-5;
pub const OP_THRESHOLD: f64 = 1e-4;
pub const MODEL_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_SEEDS: u64 = 20;
const REL_FLOOR: f64 = 1e-4;
/// Entries sampled per tensor in the full-model check.
const MODEL_SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: impl Into<String>, max_rel_err: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_err,
            threshold,
            passed: max_rel_err < threshold,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub seeds: u64,
    /// Negative control: break ReLU backward on every tape.
    pub relu_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS,
            relu_fault: false,
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Max relative error of `analytic` against central differences of `eval`.
/// `limit` caps the number of entries probed per input tensor.
fn compare(
    eval: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    analytic: &[Vec<f64>],
    limit: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let entries: Vec<usize> = match limit {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut probe = inputs.to_vec();
        for j in entries {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
        out.push(worst);
    }
    Ok(out)
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Builder,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal entries pushed away from zero so kinks stay out of FD reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 } + *v;
        }
    }
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).expect("shape")
}

/// Seeded tensor generator.
type Gen = fn(&mut ChaCha8Rng, &[usize]) -> Tensor;

fn binary(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    b: (Gen, &[usize]),
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> OpCase {
    let a = randn(rng, &[3, 4]);
    OpCase {
        name,
        inputs: vec![a, b.0(rng, b.1)],
        build: Box::new(move |t, v| f(t, v[0], v[1])),
    }
}

fn unary(name: &'static str, x: Tensor, f: fn(&mut Tape, Var) -> Var) -> OpCase {
    OpCase {
        name,
        inputs: vec![x],
        build: Box::new(move |t, v| Ok(f(t, v[0]))),
    }
}

fn expert_vars(v: &[Var], experts: usize) -> Vec<SwiGluVars> {
    (0..experts)
        .map(|e| SwiGluVars {
            gate: v[3 * e],
            up: v[3 * e + 1],
            down: v[3 * e + 2],
        })
        .collect()
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases = vec![
        binary("matmul", rng, (randn, &[4, 2]), Tape::matmul),
        binary("add", rng, (randn, &[3, 4]), Tape::add),
        binary("sub", rng, (randn, &[3, 4]), Tape::sub),
        binary("mul", rng, (randn, &[3, 4]), Tape::mul),
        binary("div", rng, (positive, &[3, 4]), Tape::div),
        unary("exp", randn(rng, &[3, 4]), Tape::exp),
        unary("log", positive(rng, &[3, 4]), Tape::log),
        unary("relu", away_from_zero(rng, &[3, 4]), Tape::relu),
        unary("silu", randn(rng, &[3, 4]), Tape::silu),
        unary("softmax_rows", randn(rng, &[3, 5]), Tape::softmax_rows),
        unary("sum", randn(rng, &[3, 4]), Tape::sum),
        unary("mean", randn(rng, &[3, 4]), Tape::mean),
        unary("mean_rows", randn(rng, &[3, 4]), Tape::mean_rows),
    ];
    let c = rng.random_range(-2.0..2.0);
    cases.push(OpCase {
        name: "scale",
        inputs: vec![randn(rng, &[3, 4])],
        build: Box::new(move |t, v| Ok(t.scale(v[0], c))),
    });
    cases.push(OpCase {
        name: "rms_norm",
        inputs: vec![randn(rng, &[3, 6]), randn(rng, &[6])],
        build: Box::new(|t, v| t.rms_norm(v[0], v[1], 1e-6)),
    });
    let ids: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
    cases.push(OpCase {
        name: "embedding",
        inputs: vec![randn(rng, &[5, 3])],
        build: Box::new(move |t, v| t.embedding(v[0], &ids)),
    });
    let dims = AttentionDims {
        batch: 2,
        seq: 3,
        heads: 4,
        kv_heads: 2,
        head_dim: 2,
    };
    cases.push(OpCase {
        name: "causal_attention",
        inputs: vec![randn(rng, &[6, 8]), randn(rng, &[6, 4]), randn(rng, &[6, 4])],
        build: Box::new(move |t, v| t.causal_attention(v[0], v[1], v[2], dims)),
    });
    let rope = RopeDims {
        seq: 3,
        heads: 2,
        head_dim: 4,
        base: 10_000.0,
    };
    cases.push(OpCase {
        name: "rope",
        inputs: vec![randn(rng, &[6, 8])],
        build: Box::new(move |t, v| t.rope(v[0], rope)),
    });
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![randn(rng, &[4, 5])],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
    });
    cases.push(OpCase {
        name: "column",
        inputs: vec![randn(rng, &[3, 4])],
        build: Box::new(|t, v| t.column(v[0], 2)),
    });
    cases.push(OpCase {
        name: "gather_rows",
        inputs: vec![randn(rng, &[4, 3])],
        build: Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
    });
    cases.push(OpCase {
        name: "scatter_add_rows",
        inputs: vec![randn(rng, &[4, 3])],
        build: Box::new(|t, v| t.scatter_add_rows(v[0], &[2, 0, 2, 4], 5)),
    });
    cases.push(OpCase {
        name: "mul_rows",
        inputs: vec![randn(rng, &[4, 3]), randn(rng, &[4, 1])],
        build: Box::new(|t, v| t.mul_rows(v[0], v[1])),
    });
    cases.push(OpCase {
        name: "reshape",
        inputs: vec![randn(rng, &[3, 4])],
        build: Box::new(|t, v| t.reshape(v[0], &[2, 6])),
    });
    cases.push(OpCase {
        name: "swiglu",
        inputs: vec![
            randn(rng, &[3, 4]),
            randn(rng, &[4, 6]),
            randn(rng, &[4, 6]),
            randn(rng, &[6, 4]),
        ],
        build: Box::new(|t, v| {
            crate::model::swiglu(
                t,
                v[0],
                &SwiGluVars {
                    gate: v[1],
                    up: v[2],
                    down: v[3],
                },
            )
        }),
    });
    for (name, path) in [
        ("moe_relu_dense_masked", ExpertPath::DenseMasked),
        ("moe_relu_sparse", ExpertPath::Sparse),
    ] {
        let mut inputs = vec![randn(rng, &[5, 4]), away_from_zero(rng, &[4, 3])];
        for _ in 0..3 {
            inputs.extend([randn(rng, &[4, 4]), randn(rng, &[4, 4]), randn(rng, &[4, 4])]);
        }
        cases.push(OpCase {
            name,
            inputs,
            build: Box::new(move |t, v| {
                let d = route_relu(t, v[0], v[1])?;
                let experts = expert_vars(&v[2..], 3);
                moe_forward(t, v[0], &d, &experts, path)
            }),
        });
    }
    cases.push(OpCase {
        name: "topk_gate",
        inputs: vec![randn(rng, &[5, 4]), randn(rng, &[4, 6])],
        build: Box::new(|t, v| Ok(route_topk(t, v[0], v[1], 2)?.weights)),
    });
    cases.push(OpCase {
        name: "l1_reg",
        inputs: vec![randn(rng, &[6, 3]), randn(rng, &[3, 4])],
        build: Box::new(|t, v| {
            let d = route_relu(t, v[0], v[1])?;
            l1_reg(t, &[d])
        }),
    });
    cases.push(OpCase {
        name: "l1_reg_lb",
        inputs: vec![randn(rng, &[6, 3]), randn(rng, &[3, 4])],
        build: Box::new(|t, v| {
            let d = route_relu(t, v[0], v[1])?;
            Ok(l1_reg_lb(t, &[d], 1)?.0)
        }),
    });
    cases.push(OpCase {
        name: "switch_lb_loss",
        inputs: vec![randn(rng, &[6, 3]), randn(rng, &[3, 4])],
        build: Box::new(|t, v| {
            let d: RouterDecision = route_topk(t, v[0], v[1], 1)?;
            let probs = d.probs.expect("topk keeps probs");
            switch_lb_loss(t, &d, probs, 1, None)
        }),
    });
    cases
}

/// Output of `build` contracted with a fixed probe.
fn probed(t: &mut Tape, build: &Builder, vars: &[Var], probe: &Tensor) -> Result<Var> {
    let out = build(t, vars)?;
    let p = t.constant(probe.clone());
    let prod = t.mul(out, p)?;
    Ok(t.sum(prod))
}

fn check_op(case: &OpCase, seed: u64, opts: GradcheckOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut tape = Tape::new();
    if opts.relu_fault {
        tape.inject_relu_fault();
    }
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let probe = randn(&mut rng, tape.shape(out));
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)
        })
        .collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let l = probed(&mut t, &case.build, &vs, &probe)?;
        Ok(t.value(l).item())
    };
    let errs = compare(&eval, &case.inputs, &analytic, None, &mut rng)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Every primitive and composite op, worst error over all seeds.
pub fn check_ops(opts: GradcheckOptions) -> Result<Vec<CheckReport>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, case) in op_cases(&mut rng).iter().enumerate() {
            let e = check_op(case, seed, opts)?;
            if worst.len() <= i {
                worst.push((case.name, e));
            } else {
                worst[i].1 = worst[i].1.max(e);
            }
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, e)| CheckReport::new(name, e, OP_THRESHOLD))
        .collect())
}

/// Configuration of the full-model check.
pub fn micro_config(router: RouterKind, seed: u64) -> MoEConfig {
    MoEConfig {
        vocab_size: 17,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        n_groups: 1,
        d_ffn: Some(16),
        n_experts: 4,
        top_k: 1,
        context_len: 8,
        router,
        seed,
        init_std: 0.3,
        ..MoEConfig::default()
    }
}

fn parameter_group(name: &str) -> &'static str {
    if name.contains("router") {
        "router"
    } else if name.contains("experts") || name.contains("ffn.") {
        "experts"
    } else if name.contains("norm") {
        "norms"
    } else if name.contains(".w") {
        "attention"
    } else if name == "embed" {
        "embedding"
    } else {
        "lm_head"
    }
}

fn model_loss(tape: &mut Tape, params: &ModelParams, batch: &TokenBatch, targets: &[usize]) -> Result<(Var, Vec<Var>)> {
    let out = forward(tape, params, batch, &ForwardOptions::default())?;
    let lm = lm_loss(tape, out.logits, targets)?;
    let loss = match params.config.router {
        RouterKind::Relu => {
            let (reg, _) = l1_reg_lb(tape, &out.decisions, params.config.active_slots())?;
            let reg = tape.scale(reg, 0.1);
            tape.add(lm, reg)?
        }
        RouterKind::Topk => {
            let mut total = lm;
            for d in &out.decisions {
                let probs = d.probs.expect("topk keeps probs");
                let s = switch_lb_loss(tape, d, probs, params.config.active_slots(), None)?;
                let s = tape.scale(s, 0.01);
                total = tape.add(total, s)?;
            }
            total
        }
        _ => lm,
    };
    Ok((loss, out.param_vars))
}

/// Full forward plus training loss on the micro configuration, per
/// parameter group, for ReLU and TopK routing.
pub fn check_model(opts: GradcheckOptions) -> Result<Vec<CheckReport>> {
    let mut reports: Vec<CheckReport> = Vec::new();
    for router in [RouterKind::Relu, RouterKind::Topk] {
        let mut worst: Vec<(&'static str, f64)> = Vec::new();
        for seed in 0..opts.seeds {
            let cfg = micro_config(router, seed);
            let params = ModelParams::init(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let ids: Vec<usize> = (0..14).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            let batch = TokenBatch::new(2, 6, [&ids[0..6], &ids[7..13]].concat())?;
            let targets = [&ids[1..7], &ids[8..14]].concat();

            let mut tape = Tape::new();
            if opts.relu_fault {
                tape.inject_relu_fault();
            }
            let (loss, vars) = model_loss(&mut tape, &params, &batch, &targets)?;
            tape.backward(loss)?;
            let analytic: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)
                })
                .collect();
            let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
            let inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
            let eval = |ts: &[Tensor]| -> Result<f64> {
                let mut p = params.clone();
                for (slot, t) in p.tensors_mut().into_iter().zip(ts) {
                    slot.data_mut().copy_from_slice(t.data());
                }
                let mut t = Tape::new();
                let (l, _) = model_loss(&mut t, &p, &batch, &targets)?;
                Ok(t.value(l).item())
            };
            let errs = compare(&eval, &inputs, &analytic, Some(MODEL_SAMPLES), &mut rng)?;
            for (name, e) in names.iter().zip(errs) {
                let group = parameter_group(name);
                match worst.iter_mut().find(|(g, _)| *g == group) {
                    Some(w) => w.1 = w.1.max(e),
                    None => worst.push((group, e)),
                }
            }
        }
        reports.extend(
            worst
                .into_iter()
                .map(|(g, e)| CheckReport::new(format!("model[{}].{g}", router.as_str()), e, MODEL_THRESHOLD)),
        );
    }
    Ok(reports)
}
