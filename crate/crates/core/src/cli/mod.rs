//! `remoe-lab` command line.
//!
//! Exit codes: 0 success, 1 other failure (including failed gradient
//! checks), 2 configuration or usage error, 3 non-finite loss, 4 some
//! sweep runs failed.

pub mod config;
pub mod manifest;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{apply_override, resolve, LabConfig};
pub use manifest::{fidelity_flags, FidelityFlag, RunManifest};
pub use run::{cmd_compare, cmd_gradcheck, cmd_report, cmd_sweep, cmd_train, CompareRow, SweepRow};

use crate::error::LabError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_SWEEP_PARTIAL: i32 = 4;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "REMOE_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "remoe-lab", version, about = "ReLU-routed vs TopK-routed MoE laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML file with [model], [train] and [data] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set model.router=topk`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds initialization and data order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Print progress every N steps.
    #[arg(long, value_name = "N")]
    pub log_every: Option<usize>,
}

impl CommonArgs {
    pub fn resolve(&self) -> crate::Result<LabConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.steps {
            overrides.push(format!("train.steps={s}"));
        }
        let cfg = resolve(self.config.as_deref(), &overrides)?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }

    pub fn out_dir(&self, fallback: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(fallback))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradcheckScope {
    Ops,
    Model,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "lambda0")]
    Lambda0,
    Alpha,
    #[value(name = "warmup_steps")]
    WarmupSteps,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Lambda0 => "train.lambda0",
            SweepParam::Alpha => "train.alpha",
            SweepParam::WarmupSteps => "train.topk_warmup_steps",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, sidecars and a checkpoint.
    Train(CommonArgs),
    /// Finite-difference gradient checks.
    Gradcheck {
        scope: GradcheckScope,
        #[arg(long, default_value_t = crate::gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
        /// Negative control: break ReLU backward.
        #[arg(long, hide = true)]
        corrupt_relu_backward: bool,
    },
    /// One run per value of a controller or warmup setting.
    Sweep {
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Paired runs of two configurations across seeds.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Base file for side A (defaults to --config).
        #[arg(long)]
        config_a: Option<PathBuf>,
        /// Base file for side B (defaults to --config).
        #[arg(long)]
        config_b: Option<PathBuf>,
        /// Overrides applied to side A only.
        #[arg(long = "set-a", value_name = "SECTION.KEY=VALUE")]
        set_a: Vec<String>,
        /// Overrides applied to side B only.
        #[arg(long = "set-b", value_name = "SECTION.KEY=VALUE")]
        set_b: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Rerun the cheaper side with more steps to match compute.
        #[arg(long)]
        equal_compute: bool,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Summarize a finished run directory.
    Report {
        /// Directory written by `train`.
        run: PathBuf,
    },
}

/// Worker count: `requested`, capped by the environment variable.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    requested.max(1).min(cap.unwrap_or(usize::MAX))
}

pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Config { .. } | LabError::Usage(_) => EXIT_CONFIG,
        LabError::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Gradcheck {
            scope,
            seeds,
            corrupt_relu_backward,
        } => cmd_gradcheck(scope, seeds, corrupt_relu_backward),
        Command::Sweep {
            param,
            values,
            common,
            parallel,
        } => cmd_sweep(param, &values, &common, parallel),
        Command::Compare {
            common,
            config_a,
            config_b,
            set_a,
            set_b,
            seeds,
            equal_compute,
            parallel,
        } => cmd_compare(&run::CompareArgs {
            common,
            config_a,
            config_b,
            set_a,
            set_b,
            seeds,
            equal_compute,
            parallel,
        }),
        Command::Report { run } => cmd_report(&run),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
