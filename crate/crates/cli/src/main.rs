//! `adab2n` command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical abort,
//! 3 gradient check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use adab2n::experiments::{cmd_dynamics, cmd_gradcheck, cmd_train, cmd_weights, format_summary};
use adab2n::harness::BufferPolicy;
use adab2n::{Error, ExperimentConfig, NormMode, ScheduleKind};

/// Environment variable naming the output directory.
const OUT_DIR_VAR: &str = "ADAB2N_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "adab2n-out";

#[derive(Parser, Debug)]
#[command(
    name = "adab2n",
    version,
    about = "Task-weight analysis and continual-learning experiments for adaptive batch normalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Closed-form and unrolled task weights of a batch schedule.
    Weights,
    /// Batch and population statistics over a run, per mode, plus a joint-training reference.
    Dynamics,
    /// Continual training and Class-IL / Task-IL evaluation.
    Train,
    /// Finite-difference check of the hand-written gradients.
    Gradcheck,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (beats the environment variable and the config key).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override any config key by dotted path, value in JSON (a bare word counts as a string).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, value_delimiter = ',', global = true)]
    seeds: Option<Vec<u64>>,
    /// Normalization mode of the layer (bn, cn, adab2n).
    #[arg(long, global = true)]
    mode: Option<NormMode>,
    /// Modes to train side by side.
    #[arg(long, value_delimiter = ',', global = true)]
    modes: Option<Vec<NormMode>>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    n_replay: Option<usize>,
    #[arg(long, global = true)]
    buffer_capacity: Option<usize>,
    #[arg(long, global = true)]
    buffer_policy: Option<BufferPolicy>,
    /// Current-task proportions to sweep.
    #[arg(long, value_delimiter = ',', global = true)]
    r_sweep: Option<Vec<f64>>,
    /// Layer momentum exponent; also the weight-analysis schedule's.
    #[arg(long, global = true)]
    kappa: Option<f64>,
    /// Layer momentum base; also the weight-analysis schedule's.
    #[arg(long, global = true)]
    eta_tilde: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Weight-analysis schedule kind (ema, cma, adab2n).
    #[arg(long, global = true)]
    schedule: Option<ScheduleKind>,
    #[arg(long, value_delimiter = ',', global = true)]
    kappa_sweep: Option<Vec<f64>>,
    /// Current-task proportion of the weight analysis.
    #[arg(long, global = true)]
    r: Option<f64>,
    /// Number of tasks, for both the stream and the weight analysis.
    #[arg(long, global = true)]
    tasks: Option<usize>,
    /// Batches per task of the weight analysis.
    #[arg(long, global = true)]
    m1: Option<usize>,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

fn build_config(o: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !o.set.is_empty() {
        let mut v = serde_json::to_value(&cfg)?;
        for kv in &o.set {
            let (k, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, k, value)?;
        }
        cfg = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    }
    macro_rules! apply {
        ($($flag:ident => $($dst:expr),+);* $(;)?) => {
            $(if let Some(v) = &o.$flag { $($dst = v.clone();)+ })*
        };
    }
    apply! {
        seeds => cfg.seeds;
        mode => cfg.layer.mode;
        modes => cfg.modes;
        lr => cfg.training.lr;
        epochs => cfg.training.epochs;
        batch_size => cfg.training.batch_size;
        n_replay => cfg.training.n_replay;
        buffer_capacity => cfg.training.buffer_capacity;
        buffer_policy => cfg.training.buffer_policy;
        r_sweep => cfg.r_sweep;
        kappa => cfg.layer.kappa, cfg.schedule.kappa;
        eta_tilde => cfg.layer.eta_tilde, cfg.schedule.eta_tilde;
        lambda => cfg.layer.lambda;
        schedule => cfg.schedule.kind;
        kappa_sweep => cfg.schedule.kappa_sweep;
        r => cfg.schedule.r;
        tasks => cfg.stream.tasks, cfg.schedule.tasks;
        m1 => cfg.schedule.m1;
    }
    if let Some(p) = &o.output {
        cfg.output = Some(p.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(o: &Overrides, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = &o.output {
        return p.clone();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_VAR).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    PathBuf::from(cfg.output.as_deref().unwrap_or(DEFAULT_OUT_DIR))
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = build_config(&cli.opts)?;
    let dir = out_dir(&cli.opts, &cfg);
    match cli.command {
        Command::Weights => {
            let (path, rows) = cmd_weights(&cfg, &dir)?;
            println!(
                "{:>8} {:>8} {:>6} {:>14} {:>14} {:>10} {:>10}",
                "schedule", "kind", "task", "closed_form", "oracle", "gap", "spread"
            );
            for r in &rows {
                println!(
                    "{:>8} {:>8} {:>6} {:>14.6} {:>14.6} {:>10.2e} {:>10.2e}",
                    r.schedule,
                    r.kind.to_string(),
                    r.task,
                    r.closed_form,
                    r.oracle,
                    r.gap,
                    r.spread
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Dynamics => {
            let (path, summary) = cmd_dynamics(&cfg, &dir)?;
            println!(
                "{:>6} {:<8} {:>6} {:>18} {:>20}",
                "seed", "mode", "layer", "distance_to_joint", "mean_boundary_spike"
            );
            for s in &summary {
                println!(
                    "{:>6} {:<8} {:>6} {:>18.4} {:>20.3}",
                    s.seed,
                    s.mode.to_string(),
                    s.layer,
                    s.distance_to_joint,
                    s.mean_boundary_spike
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Train => {
            let (path, arms) = cmd_train(&cfg, &dir)?;
            print!("{}", format_summary(&arms));
            println!("wrote {}", path.display());
        }
        Command::Gradcheck => {
            let (path, report) = cmd_gradcheck(&cfg, &dir)?;
            println!("{:<6} {:<16} {:>14} {:>5}", "scope", "group", "max_rel_error", "pass");
            for (scope, groups) in [("layer", &report.layer), ("model", &report.model)] {
                for g in groups {
                    let ok = if g.max_rel_error <= report.tolerance {
                        "yes"
                    } else {
                        "NO"
                    };
                    println!("{:<6} {:<16} {:>14.3e} {:>5}", scope, g.group, g.max_rel_error, ok);
                }
            }
            println!("wrote {}", path.display());
            if !report.passed() {
                eprintln!("gradient check failed: tolerance {}", report.tolerance);
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 2,
                _ => 1,
            })
        }
    }
}
