//! The experiment commands behind the CLI. Each writes CSV files into an
//! output directory and returns a summary for printing.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::harness::model::{ModelConfig, TinyModel};
use crate::harness::stream::{make_gaussian_stream, TaskStream};
use crate::harness::train::{train_continual, DiagRow, TrainConfig, TrainOutcome};
use crate::layer::NormMode;
use crate::momentum::{MomentumSchedule, ScheduleKind};
use crate::rng::Rng;
use crate::row;
use crate::sink::CsvSink;
use crate::weights::{weight_spread, weights_closed_form, weights_oracle_with, BatchSchedule, ReplaySplit};

// Stream ids of the per-seed generators.
const STREAM_DATA: u64 = 10;
const STREAM_INIT: u64 = 20;
const STREAM_TRAIN: u64 = 30;

/// One training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub seed: u64,
    pub mode: NormMode,
    pub r: f64,
    pub n_replay: usize,
    /// Joint training: all tasks merged into one, no replay.
    pub joint: bool,
}

pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    make_gaussian_stream(&mut Rng::with_stream(seed, STREAM_DATA), &cfg.stream)
}

/// Trains one arm. The data stream depends only on the seed, so arms that
/// share a seed see identical data and identical initial weights.
pub fn run_arm(cfg: &ExperimentConfig, spec: &RunSpec, dump_dir: Option<&Path>) -> Result<(TaskStream, TrainOutcome)> {
    let stream = build_stream(cfg, spec.seed)?;
    let stream = if spec.joint { stream.joint() } else { stream };
    let model_cfg = ModelConfig {
        dim: cfg.stream.dim,
        hidden: cfg.model.hidden.clone(),
        classes: stream.num_classes(),
        activation: cfg.model.activation,
        layer: crate::layer::LayerConfig {
            mode: spec.mode,
            ..cfg.layer.clone()
        },
    };
    let mut model = TinyModel::new(&mut Rng::with_stream(spec.seed, STREAM_INIT), model_cfg)?;
    let train = TrainConfig {
        n_replay: if spec.joint { 0 } else { spec.n_replay },
        dump_dir: dump_dir.map(Path::to_path_buf),
        ..cfg.training.clone()
    };
    let outcome = train_continual(
        &mut model,
        &stream,
        &train,
        &mut Rng::with_stream(spec.seed, STREAM_TRAIN),
    )?;
    Ok((stream, outcome))
}

/// Runs specs in parallel; results come back in input order.
pub fn run_arms(cfg: &ExperimentConfig, specs: &[RunSpec], dump_dir: Option<&Path>) -> Result<Vec<TrainOutcome>> {
    specs
        .par_iter()
        .map(|s| run_arm(cfg, s, dump_dir).map(|(_, o)| o))
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- weights

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsRow {
    pub schedule: usize,
    pub kind: ScheduleKind,
    pub kappa: f64,
    pub task: usize,
    pub closed_form: f64,
    pub oracle: f64,
    pub oracle_seen: f64,
    pub gap: f64,
    pub spread: f64,
}

/// Weight analysis rows for the configured schedule, or one schedule per
/// `kappa_sweep` entry. Batches of the first task use `r = 1`.
pub fn weights_rows(cfg: &ExperimentConfig) -> Result<Vec<WeightsRow>> {
    let sc = &cfg.schedule;
    sc.validate()?;
    let schedules: Vec<(ScheduleKind, f64)> = if sc.kappa_sweep.is_empty() {
        vec![(sc.kind, sc.kappa)]
    } else {
        sc.kappa_sweep.iter().map(|&k| (ScheduleKind::Adab2n, k)).collect()
    };
    let boundaries = sc.boundaries();
    let first = boundaries.first().copied().unwrap_or(0);
    let mut rows = Vec::new();
    for (id, (kind, kappa)) in schedules.into_iter().enumerate() {
        let momentum = MomentumSchedule::from_kind(kind, sc.eta_tilde, kappa)?;
        let r = sc.r;
        let sched = BatchSchedule::from_momentum(boundaries.clone(), momentum, |i| if i <= first { 1.0 } else { r })
            .map_err(|e| Error::Config(e.to_string()))?;
        let closed = weights_closed_form(&sched);
        let oracle = weights_oracle_with(&sched, ReplaySplit::TotalTasks);
        let seen = weights_oracle_with(&sched, ReplaySplit::SeenTasks);
        let spread = weight_spread(&closed);
        for t in 0..sched.tasks() {
            rows.push(WeightsRow {
                schedule: id,
                kind,
                kappa,
                task: t + 1,
                closed_form: closed.weights[t],
                oracle: oracle.weights[t],
                oracle_seen: seen.weights[t],
                gap: (closed.weights[t] - oracle.weights[t]).abs(),
                spread,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_weights(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, Vec<WeightsRow>)> {
    let rows = weights_rows(cfg)?;
    let sc = &cfg.schedule;
    let mut sink = CsvSink::create(
        out_dir.join("weights.csv"),
        &[
            "schedule",
            "kind",
            "eta_tilde",
            "kappa",
            "r",
            "task",
            "closed_form",
            "oracle",
            "gap",
            "oracle_seen",
            "spread",
        ],
    )?;
    for w in &rows {
        sink.push(row![
            w.schedule,
            w.kind.to_string(),
            sc.eta_tilde,
            w.kappa,
            sc.r,
            w.task,
            w.closed_form,
            w.oracle,
            w.gap,
            w.oracle_seen,
            w.spread
        ])?;
    }
    Ok((sink.finish()?, rows))
}

// --------------------------------------------------------------- dynamics

/// `sqrt(mean_i (a_i - b_i)^2)` of the population-statistics norms of one
/// layer, over the steps both runs have.
pub fn trajectory_distance(run: &[DiagRow], reference: &[DiagRow], layer: usize) -> f64 {
    let pick = |rows: &[DiagRow]| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.layer == layer)
            .map(|r| r.pop_stat_norm)
            .collect()
    };
    let (a, b) = (pick(run), pick(reference));
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    (a.iter().zip(&b).take(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64).sqrt()
}

/// For every task after the first: loss of its first batch divided by the
/// mean loss of the last `window` batches of the previous task.
pub fn boundary_spikes(rows: &[DiagRow], window: usize) -> Vec<f64> {
    let losses: Vec<(usize, f64)> = rows.iter().filter(|r| r.layer == 0).map(|r| (r.task, r.loss)).collect();
    let mut out = Vec::new();
    for k in 1..losses.len() {
        if losses[k].0 != losses[k - 1].0 {
            let prev_task = losses[k - 1].0;
            let before: Vec<f64> = losses[..k]
                .iter()
                .rev()
                .take_while(|(t, _)| *t == prev_task)
                .take(window)
                .map(|&(_, l)| l)
                .collect();
            let avg = before.iter().sum::<f64>() / before.len() as f64;
            out.push(losses[k].1 / avg);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DynamicsRun {
    pub seed: u64,
    pub mode: NormMode,
    pub joint: bool,
    pub rows: Vec<DiagRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSummary {
    pub seed: u64,
    pub mode: NormMode,
    pub layer: usize,
    pub distance_to_joint: f64,
    pub mean_boundary_spike: f64,
}

pub const DYNAMICS_MODES: [NormMode; 3] = [NormMode::Bn, NormMode::Cn, NormMode::Adab2n];

/// Every mode plus the joint-training BN reference, per seed.
pub fn dynamics_runs(cfg: &ExperimentConfig, dump_dir: Option<&Path>) -> Result<Vec<DynamicsRun>> {
    let (r, n_replay) = cfg.replay_arms()[0];
    let mut specs = Vec::new();
    for &seed in &cfg.seeds {
        for mode in DYNAMICS_MODES {
            specs.push(RunSpec {
                seed,
                mode,
                r,
                n_replay,
                joint: false,
            });
        }
        specs.push(RunSpec {
            seed,
            mode: NormMode::Bn,
            r: 1.0,
            n_replay: 0,
            joint: true,
        });
    }
    let outcomes = run_arms(cfg, &specs, dump_dir)?;
    Ok(specs
        .iter()
        .zip(outcomes)
        .map(|(s, o)| DynamicsRun {
            seed: s.seed,
            mode: s.mode,
            joint: s.joint,
            rows: o.diagnostics,
        })
        .collect())
}

pub const SPIKE_WINDOW: usize = 10;

pub fn summarize_dynamics(runs: &[DynamicsRun]) -> Vec<DynamicsSummary> {
    let mut out = Vec::new();
    for run in runs.iter().filter(|r| !r.joint) {
        let Some(reference) = runs.iter().find(|r| r.joint && r.seed == run.seed) else {
            continue;
        };
        let layers = run.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let spikes = boundary_spikes(&run.rows, SPIKE_WINDOW);
        let mean_spike = if spikes.is_empty() {
            0.0
        } else {
            spikes.iter().sum::<f64>() / spikes.len() as f64
        };
        for layer in 0..layers {
            out.push(DynamicsSummary {
                seed: run.seed,
                mode: run.mode,
                layer,
                distance_to_joint: trajectory_distance(&run.rows, &reference.rows, layer),
                mean_boundary_spike: mean_spike,
            });
        }
    }
    out
}

const DIAG_HEADER: [&str; 16] = [
    "seed",
    "mode",
    "jt",
    "step",
    "task",
    "batch_in_task",
    "layer",
    "loss",
    "ce",
    "l_ada",
    "grad_similarity",
    "grad_magnitude",
    "batch_stat_norm",
    "pop_stat_norm",
    "eta",
    "r",
];

pub fn cmd_dynamics(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, Vec<DynamicsSummary>)> {
    cfg.validate()?;
    let runs = dynamics_runs(cfg, Some(out_dir))?;
    let mut sink = CsvSink::create(out_dir.join("dynamics.csv"), &DIAG_HEADER)?;
    for run in &runs {
        for d in &run.rows {
            sink.push(row![
                run.seed,
                run.mode.to_string(),
                run.joint,
                d.step,
                d.task,
                d.batch_in_task,
                d.layer,
                d.loss,
                d.ce,
                d.l_ada,
                d.grad_similarity,
                d.grad_magnitude,
                d.batch_stat_norm,
                d.pop_stat_norm,
                d.eta,
                d.r
            ])?;
        }
    }
    let path = sink.finish()?;
    let summary = summarize_dynamics(&runs);
    let mut s = CsvSink::create(
        out_dir.join("dynamics_summary.csv"),
        &["seed", "mode", "layer", "distance_to_joint", "mean_boundary_spike"],
    )?;
    for r in &summary {
        s.push(row![
            r.seed,
            r.mode.to_string(),
            r.layer,
            r.distance_to_joint,
            r.mean_boundary_spike
        ])?;
    }
    s.finish()?;
    Ok((path, summary))
}

// ------------------------------------------------------------------ train

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub spec: RunSpec,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub mode: NormMode,
    pub r: f64,
    pub class_faa: (f64, f64),
    pub task_faa: (f64, f64),
    pub class_forgetting: (f64, f64),
    pub seeds: usize,
}

/// Every (mode, r) arm for every seed.
pub fn train_runs(cfg: &ExperimentConfig, dump_dir: Option<&Path>) -> Result<Vec<TrainRun>> {
    let mut specs = Vec::new();
    for mode in cfg.modes() {
        for (r, n_replay) in cfg.replay_arms() {
            for &seed in &cfg.seeds {
                specs.push(RunSpec {
                    seed,
                    mode,
                    r,
                    n_replay,
                    joint: false,
                });
            }
        }
    }
    let outcomes = run_arms(cfg, &specs, dump_dir)?;
    Ok(specs
        .into_iter()
        .zip(outcomes)
        .map(|(spec, outcome)| TrainRun { spec, outcome })
        .collect())
}

pub fn summarize_train(runs: &[TrainRun]) -> Vec<ArmSummary> {
    let mut arms: Vec<(NormMode, f64)> = Vec::new();
    for r in runs {
        if !arms.iter().any(|&(m, x)| m == r.spec.mode && x == r.spec.r) {
            arms.push((r.spec.mode, r.spec.r));
        }
    }
    arms.into_iter()
        .map(|(mode, r)| {
            let sel: Vec<&TrainRun> = runs.iter().filter(|x| x.spec.mode == mode && x.spec.r == r).collect();
            let col =
                |f: &dyn Fn(&TrainOutcome) -> f64| mean_std(&sel.iter().map(|x| f(&x.outcome)).collect::<Vec<_>>());
            ArmSummary {
                mode,
                r,
                class_faa: col(&|o| o.class_il.faa),
                task_faa: col(&|o| o.task_il.faa),
                class_forgetting: col(&|o| o.class_il.forgetting),
                seeds: sel.len(),
            }
        })
        .collect()
}

pub fn format_summary(arms: &[ArmSummary]) -> String {
    let mut s = format!(
        "{:<8} {:>7} {:>6} {:>18} {:>18} {:>18}\n",
        "mode", "r", "seeds", "class-IL FAA", "task-IL FAA", "class-IL forget"
    );
    let pm = |(m, sd): (f64, f64)| format!("{m:.2} ± {sd:.2}");
    for a in arms {
        s.push_str(&format!(
            "{:<8} {:>7.4} {:>6} {:>18} {:>18} {:>18}\n",
            a.mode.to_string(),
            a.r,
            a.seeds,
            pm(a.class_faa),
            pm(a.task_faa),
            pm(a.class_forgetting)
        ));
    }
    s
}

pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, Vec<ArmSummary>)> {
    cfg.validate()?;
    let runs = train_runs(cfg, Some(out_dir))?;
    let mut acc = CsvSink::create(
        out_dir.join("train.csv"),
        &["mode", "r", "seed", "protocol", "after_task", "task", "accuracy"],
    )?;
    let mut summary = CsvSink::create(
        out_dir.join("train_summary.csv"),
        &["mode", "r", "seed", "protocol", "faa", "forgetting"],
    )?;
    for run in &runs {
        for (protocol, report) in [("class_il", &run.outcome.class_il), ("task_il", &run.outcome.task_il)] {
            for (j, row) in report.per_task_acc.iter().enumerate() {
                for (t, &a) in row.iter().enumerate() {
                    acc.push(row![
                        run.spec.mode.to_string(),
                        run.spec.r,
                        run.spec.seed,
                        protocol,
                        j + 1,
                        t + 1,
                        a
                    ])?;
                }
            }
            summary.push(row![
                run.spec.mode.to_string(),
                run.spec.r,
                run.spec.seed,
                protocol,
                report.faa,
                report.forgetting
            ])?;
        }
    }
    summary.finish()?;
    Ok((acc.finish()?, summarize_train(&runs)))
}

// -------------------------------------------------------------- gradcheck

pub fn cmd_gradcheck(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, GradcheckReport)> {
    cfg.validate()?;
    let report = run_gradcheck(&cfg.gradcheck)?;
    let mut sink = CsvSink::create(
        out_dir.join("gradcheck.csv"),
        &["scope", "group", "max_rel_error", "pass"],
    )?;
    for (scope, groups) in [("layer", &report.layer), ("model", &report.model)] {
        for g in groups {
            sink.push(row![
                scope,
                g.group.clone(),
                g.max_rel_error,
                g.max_rel_error <= report.tolerance
            ])?;
        }
    }
    Ok((sink.finish()?, report))
}
