//! Sparsity measurement, L1 router regularizers, the adaptive coefficient
//! controller, and the Switch-style balance loss used by TopK baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{LabError, Result};
use crate::routing::RouterDecision;

/// Which L1 variant regularizes ReLU routers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// Plain mean of router outputs.
    L1,
    /// Router outputs weighted by their expert's load factor.
    #[default]
    L1Lb,
}

/// Multiplicative controller for the regularization coefficient.
///
/// Each step the coefficient is multiplied by `alpha` when the measured
/// sparsity is below target and divided by it when above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityController {
    pub lambda: f64,
    pub alpha: f64,
    pub target_sparsity: f64,
    pub last_sparsity: Option<f64>,
    pub step: u64,
}

impl SparsityController {
    pub fn new(lambda0: f64, alpha: f64, top_k: usize, n_experts: usize) -> Result<Self> {
        if !(lambda0.is_finite() && lambda0 > 0.0) {
            return Err(LabError::config(
                "train.lambda0",
                format!("must be finite and > 0 (got {lambda0}); a zero coefficient can never grow"),
            ));
        }
        if !(alpha.is_finite() && alpha > 1.0) {
            return Err(LabError::config("train.alpha", format!("must be > 1 (got {alpha})")));
        }
        if n_experts == 0 || top_k == 0 || top_k > n_experts {
            return Err(LabError::config("model.top_k", format!("k={top_k} with E={n_experts}")));
        }
        Ok(Self {
            lambda: lambda0,
            alpha,
            target_sparsity: 1.0 - top_k as f64 / n_experts as f64,
            last_sparsity: None,
            step: 0,
        })
    }

    /// Applies one update from the sparsity measured at the current step.
    pub fn observe(&mut self, sparsity: f64) {
        *self = update_lambda(self, sparsity);
    }
}

/// `λ_{i+1} = λ_i · α^{sign(target − S_i)}` with `sign(0) = 0`.
pub fn update_lambda(c: &SparsityController, sparsity: f64) -> SparsityController {
    let diff = c.target_sparsity - sparsity;
    let lambda = if diff > 0.0 {
        c.lambda * c.alpha
    } else if diff < 0.0 {
        c.lambda / c.alpha
    } else {
        c.lambda
    };
    SparsityController {
        lambda,
        last_sparsity: Some(sparsity),
        step: c.step + 1,
        ..*c
    }
}

/// `S = 1 − (1/(L·T·E′)) Σ 1{R > 0}` over all layers.
pub fn measure_sparsity(decisions: &[RouterDecision]) -> Result<f64> {
    let first = decisions
        .first()
        .ok_or_else(|| LabError::Usage("sparsity of an empty decision list".into()))?;
    let (t, e) = (first.tokens, first.experts);
    if decisions.iter().any(|d| d.tokens != t || d.experts != e) {
        return Err(LabError::Usage("decisions disagree on token or expert count".into()));
    }
    let active: usize = decisions.iter().map(RouterDecision::active_count).sum();
    let slots = decisions.len() * t * e;
    Ok(1.0 - active as f64 / slots as f64)
}

/// Per-layer per-expert activation ratio relative to the budget `k/E`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadFactors {
    pub layers: usize,
    pub experts: usize,
    /// Row-major `[L × E′]`.
    pub values: Vec<f64>,
    /// Detached `[T × E′]` broadcast of each layer's factors on the tape.
    pub vars: Vec<Var>,
}

impl LoadFactors {
    pub fn get(&self, layer: usize, expert: usize) -> f64 {
        self.values[layer * self.experts + expert]
    }

    /// `f_{l,e} = (E′ / (k′·T)) · Σ_t 1{R(x_t)_e > 0}` with `k′` active slots per token.
    pub fn from_decisions(decisions: &[RouterDecision], active_slots: usize) -> Self {
        let experts = decisions.first().map_or(0, |d| d.experts);
        let mut values = Vec::with_capacity(decisions.len() * experts);
        for d in decisions {
            let scale = d.experts as f64 / (active_slots as f64 * d.tokens as f64);
            values.extend(d.tokens_per_expert.iter().map(|&c| scale * c as f64));
        }
        Self {
            layers: decisions.len(),
            experts,
            values,
            vars: Vec::new(),
        }
    }

    pub fn ones(layers: usize, experts: usize) -> Self {
        Self {
            layers,
            experts,
            values: vec![1.0; layers * experts],
            vars: Vec::new(),
        }
    }
}

fn check_nonnegative(tape: &Tape, decisions: &[RouterDecision]) -> Result<()> {
    for d in decisions {
        if tape.data(d.weights).iter().any(|&w| w < 0.0) {
            return Err(LabError::Invariant(
                "negative router output under L1 regularization".into(),
            ));
        }
    }
    Ok(())
}

/// `(1/(L·T)) Σ_l Σ_t Σ_e R(x^l_t)_e`.
pub fn l1_reg(tape: &mut Tape, decisions: &[RouterDecision]) -> Result<Var> {
    check_nonnegative(tape, decisions)?;
    let first = decisions
        .first()
        .ok_or_else(|| LabError::Usage("L1 of an empty decision list".into()))?;
    let norm = 1.0 / (decisions.len() * first.tokens) as f64;
    let mut total: Option<Var> = None;
    for d in decisions {
        let s = tape.sum(d.weights);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), norm))
}

/// `(1/(L·T)) Σ f_{l,e} · R(x^l_t)_e` with the factors held constant.
pub fn weighted_l1(tape: &mut Tape, decisions: &[RouterDecision], factors: &mut LoadFactors) -> Result<Var> {
    check_nonnegative(tape, decisions)?;
    let first = decisions
        .first()
        .ok_or_else(|| LabError::Usage("L1 of an empty decision list".into()))?;
    if factors.layers != decisions.len() || factors.experts != first.experts {
        return Err(LabError::Shape {
            op: "weighted_l1",
            left: vec![factors.layers, factors.experts],
            right: vec![decisions.len(), first.experts],
        });
    }
    let norm = 1.0 / (decisions.len() * first.tokens) as f64;
    factors.vars.clear();
    let mut total: Option<Var> = None;
    for (l, d) in decisions.iter().enumerate() {
        let row = &factors.values[l * d.experts..(l + 1) * d.experts];
        let broadcast: Vec<f64> = (0..d.tokens).flat_map(|_| row.iter().copied()).collect();
        let leaf = tape.constant(Tensor::new(vec![d.tokens, d.experts], broadcast)?);
        let f = tape.stop_gradient(leaf);
        factors.vars.push(f);
        let weighted = tape.mul(d.weights, f)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), norm))
}

/// Load-balance-refined L1; factors come from this batch's active masks.
pub fn l1_reg_lb(tape: &mut Tape, decisions: &[RouterDecision], active_slots: usize) -> Result<(Var, LoadFactors)> {
    if decisions.is_empty() {
        return Err(LabError::Usage("L1 of an empty decision list".into()));
    }
    let mut factors = LoadFactors::from_decisions(decisions, active_slots);
    let loss = weighted_l1(tape, decisions, &mut factors)?;
    Ok((loss, factors))
}

/// `scale · Σ_e frac_e · meanProb_e` for a TopK decision.
///
/// `frac_e` is expert `e`'s share of the `k′·T` routing slots (the fraction
/// of tokens routed to it when `k′ = 1`). `scale` defaults to `E′`, which
/// makes a perfectly uniform router score exactly 1.
pub fn switch_lb_loss(
    tape: &mut Tape,
    decision: &RouterDecision,
    probs: Var,
    active_slots: usize,
    scale: Option<f64>,
) -> Result<Var> {
    if tape.shape(probs) != [decision.tokens, decision.experts] {
        return Err(LabError::Shape {
            op: "switch_lb_loss",
            left: tape.shape(probs).to_vec(),
            right: vec![decision.tokens, decision.experts],
        });
    }
    let slots = (active_slots * decision.tokens) as f64;
    let frac: Vec<f64> = decision.tokens_per_expert.iter().map(|&c| c as f64 / slots).collect();
    let frac = tape.constant(Tensor::new(vec![1, decision.experts], frac)?);
    let mean_prob = tape.mean_rows(probs);
    let prod = tape.mul(mean_prob, frac)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, scale.unwrap_or(decision.experts as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decision(tape: &mut Tape, rows: &[Vec<f64>]) -> RouterDecision {
        let w = tape.param(Tensor::from_rows(rows).unwrap());
        RouterDecision::from_weights(tape, w, None)
    }

    #[test]
    fn sparsity_counts() {
        let mut tape = Tape::new();
        let zero = decision(&mut tape, &[vec![0.0, 0.0]]);
        let full = decision(&mut tape, &[vec![0.1, 0.2]]);
        assert_eq!(measure_sparsity(&[zero]).unwrap(), 1.0);
        assert_eq!(measure_sparsity(&[full]).unwrap(), 0.0);
        let mixed = decision(&mut tape, &[vec![0.4, 0.0], vec![0.0, 0.0]]);
        assert_eq!(measure_sparsity(&[mixed]).unwrap(), 0.75);
        assert!(matches!(measure_sparsity(&[]), Err(LabError::Usage(_))));
    }

    #[test]
    fn lambda_update_directions() {
        let c = SparsityController::new(1e-8, 1.2, 1, 8).unwrap();
        assert_eq!(c.target_sparsity, 0.875);
        let up = update_lambda(&c, 0.80);
        assert!((up.lambda - 1.2e-8).abs() < 1e-22);
        let same = update_lambda(&c, 0.875);
        assert_eq!(same.lambda, c.lambda);
        let down = update_lambda(&c, 0.90);
        assert!((down.lambda - 1e-8 / 1.2).abs() < 1e-22);
        assert!((down.lambda - 8.333e-9).abs() < 1e-12);
        assert_eq!(down.last_sparsity, Some(0.90));
        assert_eq!(down.step, 1);
    }

    #[test]
    fn zero_lambda_rejected() {
        assert!(matches!(
            SparsityController::new(0.0, 1.2, 1, 8),
            Err(LabError::Config { .. })
        ));
        assert!(matches!(
            SparsityController::new(1e-8, 1.0, 1, 8),
            Err(LabError::Config { .. })
        ));
    }

    #[test]
    fn l1_values() {
        let mut tape = Tape::new();
        let d = decision(&mut tape, &[vec![0.2, 0.0, 0.3]]);
        let l = l1_reg(&mut tape, &[d]).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-15);

        let mut tape = Tape::new();
        let logits = tape.param(Tensor::from_rows(&[vec![-0.1, -2.0, 0.0]]).unwrap());
        let w = tape.relu(logits);
        let d = RouterDecision::from_weights(&tape, w, None);
        let l = l1_reg(&mut tape, &[d]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(logits).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l1_rejects_negative_outputs() {
        let mut tape = Tape::new();
        let d = decision(&mut tape, &[vec![-0.1, 0.2]]);
        assert!(matches!(l1_reg(&mut tape, &[d]), Err(LabError::Invariant(_))));
    }

    #[test]
    fn load_factor_values() {
        let mut tape = Tape::new();
        // E=4, k=1, T=8, expert 0 active on 2 tokens
        let mut rows = vec![vec![0.0; 4]; 8];
        rows[0][0] = 0.1;
        rows[5][0] = 0.2;
        let d = decision(&mut tape, &rows);
        let f = LoadFactors::from_decisions(&[d], 1);
        assert_eq!(f.get(0, 0), 1.0);
        assert_eq!(f.get(0, 1), 0.0);

        // overloaded expert: all 8 tokens with E=8
        let mut rows = vec![vec![0.0; 8]; 8];
        rows.iter_mut().for_each(|r| r[3] = 0.5);
        let d = decision(&mut tape, &rows);
        let f = LoadFactors::from_decisions(&[d], 1);
        assert_eq!(f.get(0, 3), 8.0);
    }

    #[test]
    fn balanced_batch_matches_plain_l1_bitwise() {
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|t| {
                (0..4)
                    .map(|e| if t % 4 == e { 0.1 + t as f64 * 0.037 } else { 0.0 })
                    .collect()
            })
            .collect();
        let d = decision(&mut tape, &rows);
        let plain = l1_reg(&mut tape, std::slice::from_ref(&d)).unwrap();
        let (lb, f) = l1_reg_lb(&mut tape, std::slice::from_ref(&d), 1).unwrap();
        assert!(f.values.iter().all(|&v| v == 1.0));
        assert_eq!(tape.value(plain).item().to_bits(), tape.value(lb).item().to_bits());
    }

    #[test]
    fn switch_loss_uniform_is_one() {
        for experts in [2usize, 4, 8] {
            let mut tape = Tape::new();
            let tokens = experts * 3;
            let probs = tape.param(Tensor::filled(&[tokens, experts], 1.0 / experts as f64));
            let rows: Vec<Vec<f64>> = (0..tokens)
                .map(|t| {
                    (0..experts)
                        .map(|e| if t % experts == e { 1.0 / experts as f64 } else { 0.0 })
                        .collect()
                })
                .collect();
            let d = decision(&mut tape, &rows);
            let l = switch_lb_loss(&mut tape, &d, probs, 1, None).unwrap();
            assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn switch_loss_collapsed_is_e() {
        let (tokens, experts) = (6, 4);
        let mut tape = Tape::new();
        let mut p = vec![vec![0.0; experts]; tokens];
        p.iter_mut().for_each(|r| r[0] = 1.0);
        let probs = tape.param(Tensor::from_rows(&p).unwrap());
        let d = decision(&mut tape, &p);
        let l = switch_lb_loss(&mut tape, &d, probs, 1, None).unwrap();
        assert!((tape.value(l).item() - experts as f64).abs() < 1e-12);
    }

    #[test]
    fn switch_loss_can_dip_below_one() {
        // Two tokens pick expert 1 with p=0.51, one picks expert 0 with p=0.99:
        // frac = (1/3, 2/3), meanProb = (0.49+0.49+0.99, 0.51+0.51+0.01)/3.
        let p = vec![vec![0.49, 0.51], vec![0.49, 0.51], vec![0.99, 0.01]];
        let mut tape = Tape::new();
        let probs = tape.param(Tensor::from_rows(&p).unwrap());
        let gates = vec![vec![0.0, 0.51], vec![0.0, 0.51], vec![0.99, 0.0]];
        let d = decision(&mut tape, &gates);
        let v = switch_lb_loss(&mut tape, &d, probs, 1, None).unwrap();
        let l = tape.value(v).item();
        let expected = 2.0 * (1.97 / 3.0 / 3.0 + 2.0 * 1.03 / 3.0 / 3.0);
        assert!((l - expected).abs() < 1e-12 && l < 1.0, "{l}");
    }

    fn lb_gradients(rows: &[Vec<f64>], lambda: f64, balanced: bool) -> (Vec<f64>, Vec<f64>, LoadFactors) {
        // Negative logits stand in for the inactive entries.
        let logits: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| if v > 0.0 { v } else { -0.5 }).collect())
            .collect();
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_rows(&logits).unwrap());
        let w = tape.relu(z);
        let d = RouterDecision::from_weights(&tape, w, None);
        let (loss, f) = if balanced {
            l1_reg_lb(&mut tape, std::slice::from_ref(&d), 1).unwrap()
        } else {
            let experts = d.experts;
            (
                l1_reg(&mut tape, std::slice::from_ref(&d)).unwrap(),
                LoadFactors::ones(1, experts),
            )
        };
        let scaled = tape.scale(loss, lambda);
        tape.backward(scaled).unwrap();
        let fgrad = f
            .vars
            .iter()
            .flat_map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        (tape.grad(z).unwrap().to_vec(), fgrad, f)
    }

    #[test]
    fn shrinkage_gradient_is_exact() {
        let rows = vec![
            vec![0.3, 0.0, 0.0, 0.0],
            vec![0.2, 0.0, 0.7, 0.0],
            vec![0.9, 0.0, 0.0, 0.1],
            vec![0.0, 0.0, 0.0, 0.0],
        ];
        let lambda = 3.7e-3;
        let t = rows.len() as f64;
        let (g, _, _) = lb_gradients(&rows, lambda, false);
        for (i, &v) in rows.iter().flatten().enumerate() {
            let want = if v > 0.0 { lambda / t } else { 0.0 };
            assert!((g[i] - want).abs() <= 1e-10 * want.abs(), "{i}: {} vs {want}", g[i]);
        }
        let (g, fgrad, f) = lb_gradients(&rows, lambda, true);
        assert_eq!(f.get(0, 0), 3.0);
        for (i, &v) in rows.iter().flatten().enumerate() {
            let want = if v > 0.0 { lambda * f.get(0, i % 4) / t } else { 0.0 };
            assert!((g[i] - want).abs() <= 1e-10 * want.abs(), "{i}: {} vs {want}", g[i]);
        }
        assert!(fgrad.iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn lambda_is_multiplicative_in_history(
            lambda0 in 1e-10f64..1.0,
            alpha in 1.01f64..2.0,
            history in proptest::collection::vec(prop_oneof![Just(0.5), Just(0.875), Just(0.95)], 0..200),
        ) {
            let mut c = SparsityController::new(lambda0, alpha, 1, 8).unwrap();
            let (mut up, mut down) = (0i32, 0i32);
            for &s in &history {
                c.observe(s);
                if s < 0.875 { up += 1 } else if s > 0.875 { down += 1 }
            }
            let want = lambda0 * alpha.powi(up - down);
            prop_assert!(((c.lambda - want) / want).abs() < 1e-12);
            prop_assert_eq!(c.step, history.len() as u64);
        }
    }
}
