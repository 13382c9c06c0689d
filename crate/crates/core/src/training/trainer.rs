use std::path::PathBuf;

use super::config::{DataConfig, TrainConfig};
use super::data::{Batch, CorpusStream};
use super::optim::{clip_global_norm, cosine_lr, AdamW};
use super::stage::{Stage, StageDetector};
use crate::autodiff::{Tape, Var};
use crate::error::{LabError, Result};
use crate::metrics::{
    append_eval, flip_stats, write_domain_heatmaps, write_heatmap, write_profile, ActivationMasks, CsvAppender,
    Heatmap, HeatmapAccumulator, MetricsRecord, ProfileRow, TokenExpertProfile,
};
use crate::model::{forward, lm_loss, Checkpoint, ForwardOptions, MoEConfig, ModelParams};
use crate::regularization::{l1_reg, l1_reg_lb, measure_sparsity, switch_lb_loss, RegularizerKind, SparsityController};
use crate::routing::{RouterDecision, RouterKind};

/// Where and how much a run writes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Metrics CSV, sidecars and the final checkpoint go here.
    pub out_dir: Option<PathBuf>,
    /// Print a progress line to stderr every this many steps.
    pub log_every: Option<usize>,
}

/// What one optimizer step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: MetricsRecord,
    /// Active expert·token units spent by this step.
    pub compute_units: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    /// `(steps completed, validation loss)`; the first entry precedes training.
    pub evals: Vec<(usize, f64)>,
    pub sparsifying_onset: Option<usize>,
    /// Settling time.
    pub stable_onset: Option<usize>,
    /// Routed-token ratios on the validation batches after training.
    pub heatmap: Option<Heatmap>,
    pub profile: Vec<ProfileRow>,
    /// Rank correlation of log token frequency with mean active experts.
    pub profile_correlation: Option<f64>,
    pub compute_units: f64,
    pub final_lambda: Option<f64>,
}

impl RunSummary {
    pub fn initial_valid_loss(&self) -> f64 {
        self.evals.first().map_or(f64::NAN, |e| e.1)
    }

    pub fn final_valid_loss(&self) -> f64 {
        self.evals.last().map_or(f64::NAN, |e| e.1)
    }

    pub fn dead_experts(&self) -> Vec<(usize, usize)> {
        self.heatmap.as_ref().map(Heatmap::dead_experts).unwrap_or_default()
    }

    /// Records from the stable onset onward.
    pub fn stable_records(&self) -> &[MetricsRecord] {
        match self.stable_onset {
            Some(s) => &self.records[s.min(self.records.len())..],
            None => &[],
        }
    }

    pub fn mean_compute_per_step(&self) -> f64 {
        self.compute_units / self.records.len().max(1) as f64
    }
}

/// Owns the model, optimizer, controller and data of one run.
pub struct Trainer {
    pub model_cfg: MoEConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParams,
    pub controller: Option<SparsityController>,
    pub step: usize,
    opt: AdamW,
    detector: StageDetector,
    data: CorpusStream,
    valid: Vec<Batch>,
    calibration_masks: Option<ActivationMasks>,
    profile: TokenExpertProfile,
    compute_units: f64,
}

impl Trainer {
    pub fn new(model_cfg: &MoEConfig, train_cfg: &TrainConfig, data_cfg: &DataConfig) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let params = ModelParams::init(model_cfg)?;
        let model_cfg = params.config.clone();
        if model_cfg.vocab_size < super::data::BYTE_VOCAB {
            return Err(LabError::config("model.vocab_size", "byte corpus needs 256 ids"));
        }
        if let Some(k) = train_cfg.topk_warmup_k {
            if k > model_cfg.n_experts {
                return Err(LabError::config(
                    "train.topk_warmup_k",
                    format!("{k} exceeds n_experts"),
                ));
            }
        }
        let controller = (model_cfg.router == RouterKind::Relu)
            .then(|| SparsityController::new(train_cfg.lambda0, train_cfg.alpha, model_cfg.top_k, model_cfg.n_experts))
            .transpose()?;
        let data = CorpusStream::from_config(data_cfg, model_cfg.context_len, train_cfg.seed)?;
        let valid = data.valid_batches(train_cfg.batch_size, train_cfg.eval_batches)?;
        if valid.is_empty() {
            return Err(LabError::config(
                "data.valid_fraction",
                format!("no full validation batch of {} sequences", train_cfg.batch_size),
            ));
        }
        Ok(Self {
            detector: StageDetector::new(
                model_cfg.target_sparsity(),
                train_cfg.stage_band,
                train_cfg.stage_window,
            ),
            opt: AdamW::from_config(train_cfg),
            model_cfg,
            train_cfg: train_cfg.clone(),
            params,
            controller,
            step: 0,
            data,
            valid,
            calibration_masks: None,
            profile: TokenExpertProfile::new(),
            compute_units: 0.0,
        })
    }

    pub fn stage(&self) -> Stage {
        self.detector.stage()
    }

    /// Step at which stage III began, if it has.
    pub fn stable_onset(&self) -> Option<usize> {
        self.detector.stable_onset()
    }

    /// One training step on the next batch of the stream.
    pub fn next_step(&mut self) -> Result<StepOutcome> {
        let batch = self.data.next_train(self.train_cfg.batch_size)?;
        self.train_step(&batch)
    }

    fn forward_options(&self) -> ForwardOptions {
        let warm = self.model_cfg.router == RouterKind::Topk && self.step < self.train_cfg.topk_warmup_steps;
        ForwardOptions {
            top_k: warm.then(|| self.train_cfg.topk_warmup_k.unwrap_or(self.model_cfg.n_experts)),
            ..ForwardOptions::default()
        }
    }

    /// Active expert·token units for one batch, in units of a full-size expert.
    fn compute_of(&self, decisions: &[RouterDecision], tokens: usize) -> f64 {
        match self.model_cfg.router {
            RouterKind::Dense => tokens as f64,
            RouterKind::DenseXE => (tokens * self.model_cfg.n_experts) as f64,
            _ => {
                let active: usize = decisions.iter().map(RouterDecision::active_count).sum();
                active as f64 / (decisions.len().max(1) * self.model_cfg.granularity) as f64
            }
        }
    }

    /// Regularization term (unscaled) and its weight for the current router.
    fn regularizer(&self, tape: &mut Tape, decisions: &[RouterDecision]) -> Result<Option<(Var, f64)>> {
        Ok(match self.model_cfg.router {
            RouterKind::Relu => {
                let lambda = self.controller.as_ref().map_or(0.0, |c| c.lambda);
                let reg = match self.train_cfg.regularizer {
                    RegularizerKind::L1 => l1_reg(tape, decisions)?,
                    RegularizerKind::L1Lb => l1_reg_lb(tape, decisions, self.model_cfg.active_slots())?.0,
                };
                Some((reg, lambda))
            }
            RouterKind::Topk => {
                let mut total: Option<Var> = None;
                for d in decisions {
                    let probs = d
                        .probs
                        .ok_or_else(|| LabError::Invariant("topk decision without probs".into()))?;
                    let s = switch_lb_loss(
                        tape,
                        d,
                        probs,
                        self.model_cfg.active_slots(),
                        self.train_cfg.switch_scale,
                    )?;
                    total = Some(match total {
                        None => s,
                        Some(a) => tape.add(a, s)?,
                    });
                }
                total.map(|t| (t, self.train_cfg.lb_weight))
            }
            _ => None,
        })
    }

    /// Forward, backward, one AdamW update and one controller update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let lr = cosine_lr(self.step, &self.train_cfg);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &self.params, &batch.inputs, &self.forward_options())?;
        let lm = lm_loss(&mut tape, out.logits, &batch.targets)?;
        let (loss, reg_value, lambda) = match self.regularizer(&mut tape, &out.decisions)? {
            Some((reg, w)) => {
                let scaled = tape.scale(reg, w);
                (tape.add(lm, scaled)?, tape.value(reg).item(), w)
            }
            None => (lm, 0.0, 0.0),
        };
        let lm_value = tape.value(lm).item();
        let moe = !out.decisions.is_empty();
        let sparsity = if moe { measure_sparsity(&out.decisions)? } else { 0.0 };
        let total = tape.value(loss).item();
        if !total.is_finite() {
            return Err(LabError::NonFinite {
                step: self.step,
                lambda,
                sparsity,
                lr,
                detail: format!("lm_loss={lm_value}, reg_loss={reg_value}"),
            });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = out
            .param_vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)
            })
            .collect();
        clip_global_norm(&mut grads, self.train_cfg.grad_clip);
        self.opt.step(&mut self.params.tensors_mut(), &grads, lr)?;

        let tokens = batch.inputs.tokens();
        let (s_per_layer, f_matrix, mean_active) = if moe {
            let per_layer = out.decisions.iter().map(|d| d.batch_sparsity).collect();
            let f = out
                .decisions
                .iter()
                .flat_map(|d| d.tokens_per_expert.iter().map(move |&c| c as f64 / d.tokens as f64))
                .collect();
            let active: usize = out.decisions.iter().map(RouterDecision::active_count).sum();
            (per_layer, f, active as f64 / (tokens * out.decisions.len()) as f64)
        } else {
            let width = match self.model_cfg.router {
                RouterKind::DenseXE => self.model_cfg.expert_count(),
                _ => self.model_cfg.granularity,
            };
            (vec![0.0; self.model_cfg.n_layers], Vec::new(), width as f64)
        };
        if moe && self.step >= self.train_cfg.profile_start() {
            self.profile.accumulate(&out.decisions, &batch.inputs.ids)?;
        }
        if let Some(c) = self.controller.as_mut() {
            c.observe(sparsity);
            if !(c.lambda.is_finite() && c.lambda > 0.0) {
                return Err(LabError::NonFinite {
                    step: self.step,
                    lambda: c.lambda,
                    sparsity,
                    lr,
                    detail: "regularization coefficient left (0, inf)".into(),
                });
            }
        }
        let stage = self.detector.observe(sparsity);
        let compute = self.compute_of(&out.decisions, tokens);
        self.compute_units += compute;
        let record = MetricsRecord {
            step: self.step,
            lm_loss: lm_value,
            reg_loss: reg_value,
            lambda,
            lr,
            s_overall: sparsity,
            s_per_layer,
            f_matrix,
            mean_active,
            stage,
            flip: None,
        };
        self.step += 1;
        Ok(StepOutcome {
            record,
            compute_units: compute,
        })
    }

    /// Mean validation loss and routed-token heatmap, without updates.
    pub fn evaluate(&self) -> Result<(f64, Option<Heatmap>)> {
        self.evaluate_on(&self.valid)
    }

    fn evaluate_on(&self, batches: &[Batch]) -> Result<(f64, Option<Heatmap>)> {
        let mut acc = HeatmapAccumulator::new();
        let mut total = 0.0;
        for b in batches {
            let mut tape = Tape::new();
            let out = forward(&mut tape, &self.params, &b.inputs, &self.forward_options())?;
            let l = lm_loss(&mut tape, out.logits, &b.targets)?;
            total += tape.value(l).item();
            if !out.decisions.is_empty() {
                acc.add(&out.decisions);
            }
        }
        let heat = (!acc.is_empty()).then(|| acc.finish());
        Ok((total / batches.len().max(1) as f64, heat))
    }

    /// Activation masks on the calibration batch (the first validation batch).
    pub fn calibration_masks(&self) -> Result<Option<ActivationMasks>> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, &self.params, &self.valid[0].inputs, &self.forward_options())?;
        if out.decisions.is_empty() {
            return Ok(None);
        }
        ActivationMasks::from_decisions(&out.decisions).map(Some)
    }

    /// Per-domain heatmaps over each domain's validation batches.
    pub fn domain_heatmaps(&self) -> Result<Vec<(String, Heatmap)>> {
        let mut out = Vec::new();
        for (i, label) in self.data.domain_labels().iter().enumerate() {
            let batches = self
                .data
                .valid_batches_for(i, self.train_cfg.batch_size, self.train_cfg.eval_batches)?;
            if let (_, Some(h)) = self.evaluate_on(&batches)? {
                out.push((label.to_string(), h));
            }
        }
        Ok(out)
    }

    fn eval_point(&self, opts: &RunOptions, evals: &mut Vec<(usize, f64)>) -> Result<Option<Heatmap>> {
        let (loss, heat) = self.evaluate()?;
        evals.push((self.step, loss));
        if let Some(dir) = &opts.out_dir {
            append_eval(dir, self.step, loss)?;
            if let Some(h) = &heat {
                write_heatmap(dir, self.step, h)?;
            }
        }
        Ok(heat)
    }

    /// Trains for the configured number of steps.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunSummary> {
        let appender = match &opts.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
                Some(CsvAppender::create(&dir.join("metrics.csv"), self.model_cfg.n_layers)?)
            }
            None => None,
        };
        let mut records = Vec::with_capacity(self.train_cfg.steps);
        let mut evals = Vec::new();
        let mut heatmap = self.eval_point(opts, &mut evals)?;
        self.calibration_masks = self.calibration_masks()?;
        let every = self.train_cfg.eval_every;
        while self.step < self.train_cfg.steps {
            let mut outcome = self.next_step()?;
            if self.step.is_multiple_of(every) || self.step == self.train_cfg.steps {
                if let Some(prev) = &self.calibration_masks {
                    let curr = self.calibration_masks()?.expect("moe stays moe");
                    outcome.record.flip = Some(flip_stats(prev, &curr, 0)?);
                    self.calibration_masks = Some(curr);
                }
                heatmap = self.eval_point(opts, &mut evals)?;
            }
            if let Some(n) = opts.log_every {
                if n > 0 && (outcome.record.step % n == 0 || self.step == self.train_cfg.steps) {
                    let r = &outcome.record;
                    eprintln!(
                        "step {:>6} lm {:.4} S {:.4} lambda {:.3e} lr {:.3e} stage {}",
                        r.step, r.lm_loss, r.s_overall, r.lambda, r.lr, r.stage
                    );
                }
            }
            if let Some(a) = &appender {
                a.send(outcome.record.clone())?;
            }
            records.push(outcome.record);
        }
        if let Some(a) = appender {
            a.finish()?;
        }
        let profile = self.profile.rank_ordered();
        if let Some(dir) = &opts.out_dir {
            if !profile.is_empty() {
                write_profile(dir, self.step, &profile)?;
            }
            if heatmap.is_some() {
                write_domain_heatmaps(dir, self.step, &self.domain_heatmaps()?)?;
            }
            self.checkpoint().save(&dir.join("checkpoint.bin"))?;
        }
        Ok(RunSummary {
            records,
            evals,
            sparsifying_onset: self.detector.sparsifying_onset(),
            stable_onset: self.detector.stable_onset(),
            heatmap,
            profile_correlation: self.profile.frequency_correlation(),
            profile,
            compute_units: self.compute_units,
            final_lambda: self.controller.map(|c| c.lambda),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            controller: self.controller,
            step: self.step as u64,
        }
    }
}
