use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use super::config::{resolve, LabConfig};
use super::manifest::RunManifest;
use super::{worker_count, CommonArgs, GradcheckScope, SweepParam, EXIT_FAILURE, EXIT_OK, EXIT_SWEEP_PARTIAL};
use crate::error::{LabError, Result};
use crate::gradcheck::{check_model, check_ops, CheckReport, GradcheckOptions};
use crate::metrics::parse_csv;
use crate::training::{stage_boundaries, RunOptions, RunSummary, Stage, Trainer};

/// Runs `f` over `jobs` on up to `workers` threads, keeping job order.
fn run_parallel<T: Send, R: Send>(jobs: Vec<T>, workers: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..worker_count(workers).min(n.max(1)) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, job)) = next else { break };
                let r = f(job);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Writes the manifest, then trains.
pub fn train_in(cfg: &LabConfig, command: &str, out: &Path, log_every: Option<usize>) -> Result<RunSummary> {
    RunManifest::new(command, cfg).write(out)?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, &cfg.data)?;
    trainer.run(&RunOptions {
        out_dir: Some(out.to_path_buf()),
        log_every,
    })
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".into(), |s| s.to_string())
}

pub fn cmd_train(common: &CommonArgs) -> Result<i32> {
    let cfg = common.resolve()?;
    let out = common.out_dir("train");
    let t0 = Instant::now();
    let s = train_in(&cfg, "train", &out, common.log_every)?;
    println!("run directory      {}", out.display());
    println!("steps              {}", s.records.len());
    println!(
        "valid loss         {:.4} -> {:.4}",
        s.initial_valid_loss(),
        s.final_valid_loss()
    );
    println!("stage II onset     {}", opt(s.sparsifying_onset));
    println!("stage III onset    {}", opt(s.stable_onset));
    println!("dead experts       {:?}", s.dead_experts());
    if let Some(r) = s.profile_correlation {
        println!("freq/active rank correlation {r:.4}");
    }
    println!("compute units      {:.0}", s.compute_units);
    println!("elapsed            {:.1}s", t0.elapsed().as_secs_f64());
    Ok(EXIT_OK)
}

fn print_reports(reports: &[CheckReport]) -> bool {
    let mut ok = true;
    for r in reports {
        ok &= r.passed;
        println!(
            "{} {:<28} max_rel_err={:.3e} threshold={:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.threshold
        );
    }
    ok
}

pub fn cmd_gradcheck(scope: GradcheckScope, seeds: u64, relu_fault: bool) -> Result<i32> {
    let opts = GradcheckOptions { seeds, relu_fault };
    let mut reports = Vec::new();
    if matches!(scope, GradcheckScope::Ops | GradcheckScope::All) {
        reports.extend(check_ops(opts)?);
    }
    if matches!(scope, GradcheckScope::Model | GradcheckScope::All) {
        reports.extend(check_model(opts)?);
    }
    let ok = print_reports(&reports);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        eprintln!("gradient check failed: {}", failed.join(", "));
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub final_valid_loss: Option<f64>,
    /// Steps until the stable stage began.
    pub settling_time: Option<usize>,
    pub error: Option<String>,
}

/// Resolves the base config and one config per value.
fn sweep_configs(
    param: SweepParam,
    values: &[String],
    common: &CommonArgs,
) -> Result<Vec<(String, Result<LabConfig>)>> {
    if values.len() < 2 {
        return Err(LabError::Usage(format!(
            "a sweep needs at least two values, got {}",
            values.len()
        )));
    }
    common.resolve()?;
    Ok(values
        .iter()
        .map(|v| {
            let mut c = common.clone();
            c.overrides.push(format!("{}={v}", param.key()));
            (v.clone(), c.resolve())
        })
        .collect())
}

pub fn cmd_sweep(param: SweepParam, values: &[String], common: &CommonArgs, parallel: usize) -> Result<i32> {
    let jobs = sweep_configs(param, values, common)?;
    let out = common.out_dir("sweep");
    fs::create_dir_all(&out).map_err(|e| LabError::io(&out, e))?;
    let name = format!("{param:?}").to_lowercase();
    let rows = run_parallel(jobs, parallel, |(value, cfg)| {
        let dir = out.join(format!("{name}_{value}"));
        let result = cfg.and_then(|c| train_in(&c, "sweep", &dir, common.log_every));
        match result {
            Ok(s) => SweepRow {
                value,
                final_valid_loss: Some(s.final_valid_loss()),
                settling_time: s.stable_onset,
                error: None,
            },
            Err(e) => SweepRow {
                value,
                final_valid_loss: None,
                settling_time: None,
                error: Some(e.to_string()),
            },
        }
    });
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| LabError::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let werr = |e: csv::Error| LabError::Format {
        path: path.clone(),
        reason: e.to_string(),
    };
    w.write_record([param.key(), "final_valid_loss", "settling_time", "error"])
        .map_err(werr)?;
    println!("{:<12} {:>16} {:>14}", param.key(), "final_valid_loss", "settling_time");
    for r in &rows {
        let loss = r.final_valid_loss.map_or_else(String::new, |l| format!("{l:.6}"));
        let settle = r.settling_time.map_or_else(String::new, |s| s.to_string());
        println!(
            "{:<12} {:>16} {:>14} {}",
            r.value,
            loss,
            settle,
            r.error.as_deref().unwrap_or("")
        );
        w.write_record([r.value.as_str(), &loss, &settle, r.error.as_deref().unwrap_or("")])
            .map_err(werr)?;
    }
    w.flush().map_err(|e| LabError::io(&path, e))?;
    Ok(if rows.iter().any(|r| r.error.is_some()) {
        EXIT_SWEEP_PARTIAL
    } else {
        EXIT_OK
    })
}

pub struct CompareArgs {
    pub common: CommonArgs,
    pub config_a: Option<PathBuf>,
    pub config_b: Option<PathBuf>,
    pub set_a: Vec<String>,
    pub set_b: Vec<String>,
    pub seeds: Vec<u64>,
    pub equal_compute: bool,
    pub parallel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub side: String,
    pub seed: u64,
    pub router: String,
    pub steps: usize,
    pub initial_valid_loss: f64,
    pub final_valid_loss: f64,
    pub compute_units: f64,
    pub settling_time: Option<usize>,
    pub dead_experts: usize,
    /// Steps were raised to match the other side's compute.
    pub extended: bool,
}

fn side_config(base: Option<&Path>, common: &CommonArgs, extra: &[String], seed: u64) -> Result<LabConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.steps {
        overrides.push(format!("train.steps={s}"));
    }
    overrides.extend_from_slice(extra);
    Ok(resolve(base.or(common.config.as_deref()), &overrides)?.with_seed(seed))
}

fn compare_row(side: &str, cfg: &LabConfig, s: &RunSummary, extended: bool) -> CompareRow {
    CompareRow {
        side: side.into(),
        seed: cfg.train.seed,
        router: cfg.model.router.as_str().into(),
        steps: cfg.train.steps,
        initial_valid_loss: s.initial_valid_loss(),
        final_valid_loss: s.final_valid_loss(),
        compute_units: s.compute_units,
        settling_time: s.stable_onset,
        dead_experts: s.dead_experts().len(),
        extended,
    }
}

/// Steps needed at `per_step` units to reach `target` units.
pub fn equal_compute_steps(target: f64, per_step: f64) -> usize {
    (target / per_step).ceil() as usize
}

pub fn cmd_compare(args: &CompareArgs) -> Result<i32> {
    if args.seeds.is_empty() {
        return Err(LabError::Usage("compare needs at least one seed".into()));
    }
    let out = args.common.out_dir("compare");
    let mut jobs = Vec::new();
    for &seed in &args.seeds {
        jobs.push((
            "a",
            side_config(args.config_a.as_deref(), &args.common, &args.set_a, seed)?,
        ));
        jobs.push((
            "b",
            side_config(args.config_b.as_deref(), &args.common, &args.set_b, seed)?,
        ));
    }
    let log = args.common.log_every;
    let results = run_parallel(jobs, args.parallel, |(side, cfg)| {
        let dir = out.join(format!("{side}_seed{}", cfg.train.seed));
        train_in(&cfg, "compare", &dir, log).map(|s| (side, cfg, s))
    });
    let mut runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut extended = vec![false; runs.len()];
    if args.equal_compute {
        let mut reruns = Vec::new();
        for pair in (0..runs.len()).step_by(2) {
            let (a, b) = (&runs[pair].2, &runs[pair + 1].2);
            let (cheap, target) = if a.compute_units < b.compute_units {
                (pair, b.compute_units)
            } else {
                (pair + 1, a.compute_units)
            };
            let (side, cfg, s) = &runs[cheap];
            let steps = equal_compute_steps(target, s.mean_compute_per_step());
            if steps > cfg.train.steps {
                let mut c = cfg.clone();
                c.train.steps = steps;
                reruns.push((cheap, *side, c));
            }
        }
        let done = run_parallel(reruns, args.parallel, |(i, side, cfg)| {
            let dir = out.join(format!("{side}_seed{}_equal", cfg.train.seed));
            train_in(&cfg, "compare", &dir, log).map(|s| (i, side, cfg, s))
        });
        for r in done {
            let (i, side, cfg, s) = r?;
            runs[i] = (side, cfg, s);
            extended[i] = true;
        }
    }
    let rows: Vec<CompareRow> = runs
        .iter()
        .zip(&extended)
        .map(|((side, cfg, s), &ext)| compare_row(side, cfg, s, ext))
        .collect();
    let path = out.join("compare.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| LabError::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    for r in &rows {
        w.serialize(r).map_err(|e| LabError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| LabError::io(&path, e))?;
    println!(
        "{:<4} {:>5} {:>6} {:>7} {:>10} {:>10} {:>14} {:>8} {:>5}",
        "side", "seed", "router", "steps", "init", "final", "compute", "settle", "dead"
    );
    for r in &rows {
        println!(
            "{:<4} {:>5} {:>6} {:>7} {:>10.4} {:>10.4} {:>14.0} {:>8} {:>5}{}",
            r.side,
            r.seed,
            r.router,
            r.steps,
            r.initial_valid_loss,
            r.final_valid_loss,
            r.compute_units,
            opt(r.settling_time),
            r.dead_experts,
            if r.extended { " (extended)" } else { "" }
        );
    }
    let deltas: Vec<f64> = rows
        .chunks(2)
        .map(|p| p[1].final_valid_loss - p[0].final_valid_loss)
        .collect();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    println!("final valid loss delta (b - a) per seed {deltas:?}, mean {mean:.6}");
    let summary = serde_json::json!({ "delta_b_minus_a": deltas, "mean_delta": mean, "rows": rows });
    let spath = out.join("compare_summary.json");
    fs::write(
        &spath,
        serde_json::to_string_pretty(&summary).map_err(|e| LabError::Invariant(e.to_string()))?,
    )
    .map_err(|e| LabError::io(&spath, e))?;
    Ok(EXIT_OK)
}

pub fn cmd_report(dir: &Path) -> Result<i32> {
    let manifest = RunManifest::read(dir)?;
    let path = dir.join("metrics.csv");
    let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    let records = parse_csv(&path, &text)?;
    let target = manifest.config.model.target_sparsity();
    let labels: Vec<Stage> = records.iter().map(|r| r.stage).collect();
    println!("run                {}", dir.display());
    println!("router             {}", manifest.config.model.router.as_str());
    println!("steps              {}", records.len());
    for (stage, at) in stage_boundaries(&labels) {
        println!("stage {:<4} from step {at}", stage.label());
    }
    let stable: Vec<_> = records.iter().filter(|r| r.stage == Stage::Stable).collect();
    if !stable.is_empty() {
        let n = stable.len() as f64;
        let dev = stable.iter().map(|r| (r.s_overall - target).abs()).sum::<f64>() / n;
        let worst = stable.iter().map(|r| (r.s_overall - target).abs()).fold(0.0, f64::max);
        let active = stable.iter().map(|r| r.mean_active).sum::<f64>() / n;
        println!("stable |S - target| mean {dev:.4}, max {worst:.4}");
        println!("stable mean active experts {active:.4}");
    }
    if let Some(last) = records.last() {
        println!("final lm loss      {:.4}", last.lm_loss);
        println!("final lambda       {:.4e}", last.lambda);
    }
    Ok(EXIT_OK)
}
