//! The continual training loop and Task-IL / Class-IL evaluation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{arg_error, Error, Result};
use crate::harness::buffer::{sample_batch, BufferPolicy, MemoryBuffer, TaskBatch};
use crate::harness::model::TinyModel;
use crate::harness::stream::{Sample, TaskStream};
use crate::rng::Rng;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Current-task samples per batch.
    pub batch_size: usize,
    /// Replayed samples per batch.
    pub n_replay: usize,
    pub buffer_capacity: usize,
    pub buffer_policy: BufferPolicy,
    /// Where to write the state dump on a numerical abort.
    #[serde(skip)]
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 1,
            batch_size: 10,
            n_replay: 10,
            buffer_capacity: 200,
            buffer_policy: BufferPolicy::Reservoir,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return arg_error(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return arg_error("epochs and batch_size must be >= 1");
        }
        if self.n_replay > 0 && self.buffer_capacity == 0 {
            return arg_error("replay needs a buffer capacity >= 1");
        }
        Ok(())
    }

    /// Current-task share of a full replay batch.
    pub fn r(&self) -> f64 {
        self.batch_size as f64 / (self.batch_size + self.n_replay) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    TaskIl,
    ClassIl,
}

/// Accuracy matrix: row `j` holds the accuracy on tasks `0..=j` after
/// training task `j`, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task_acc: Vec<Vec<f64>>,
    pub faa: f64,
    pub forgetting: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let last = match rows.last() {
            Some(r) if !r.is_empty() => r,
            _ => return arg_error("an evaluation report needs at least one non-empty row"),
        };
        let faa = last.iter().sum::<f64>() / last.len() as f64;
        let t = last.len();
        // Mean over old tasks of (best accuracy before the final row) - final accuracy.
        let forgetting = if t < 2 || rows.len() < 2 {
            0.0
        } else {
            let prev = &rows[..rows.len() - 1];
            let drops: Vec<f64> = (0..t - 1)
                .map(|k| {
                    let best = prev
                        .iter()
                        .filter_map(|r| r.get(k).copied())
                        .fold(f64::NEG_INFINITY, f64::max);
                    if best.is_finite() {
                        best - last[k]
                    } else {
                        0.0
                    }
                })
                .collect();
            drops.iter().sum::<f64>() / drops.len() as f64
        };
        Ok(Self {
            per_task_acc: rows,
            faa,
            forgetting,
        })
    }
}

/// One row of the per-batch, per-layer diagnostics series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub step: usize,
    pub task: usize,
    pub batch_in_task: usize,
    pub layer: usize,
    pub loss: f64,
    pub ce: f64,
    pub l_ada: f64,
    pub grad_similarity: f64,
    pub grad_magnitude: f64,
    pub batch_stat_norm: f64,
    pub pop_stat_norm: f64,
    pub eta: f64,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub class_il: EvalReport,
    pub task_il: EvalReport,
    pub steps_per_task: Vec<usize>,
    pub diagnostics: Vec<DiagRow>,
    pub buffer: MemoryBuffer,
}

fn stack(samples: &[&Sample]) -> Result<Tensor3> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let data: Vec<f64> = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    Tensor3::from_vec(samples.len(), dim, 1, data)
}

/// Accuracy (percent) on `samples` of one task. `allowed` restricts the
/// argmax to a class range.
pub fn accuracy(model: &TinyModel, samples: &[Sample], allowed: std::ops::Range<usize>) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let classes = model.classes();
    if allowed.is_empty() || allowed.end > classes {
        return arg_error("allowed class range is empty or exceeds the head");
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let logits = model.predict(&stack(&refs)?)?;
    let correct = samples
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            let row = &logits[i * classes..(i + 1) * classes];
            let best = allowed
                .clone()
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap();
            best == s.label
        })
        .count();
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Test accuracy on tasks `0..seen` under `protocol`.
pub fn accuracy_row(model: &TinyModel, stream: &TaskStream, seen: usize, protocol: Protocol) -> Result<Vec<f64>> {
    (0..seen)
        .map(|t| {
            let allowed = match protocol {
                Protocol::TaskIl => stream.classes_of(t),
                Protocol::ClassIl => 0..seen * stream.classes_per_task,
            };
            accuracy(model, &stream.tasks[t].test, allowed)
        })
        .collect()
}

/// Single-row report treating every task of the stream as seen.
pub fn evaluate(model: &TinyModel, stream: &TaskStream, protocol: Protocol) -> Result<EvalReport> {
    EvalReport::from_rows(vec![accuracy_row(model, stream, stream.num_tasks(), protocol)?])
}

fn dump_state(cfg: &TrainConfig, model: &TinyModel, step: usize, loss: f64) -> Result<Option<PathBuf>> {
    let Some(dir) = &cfg.dump_dir else {
        return Ok(None);
    };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("abort_step{step}.json"));
    let dump = serde_json::json!({ "step": step, "loss": loss, "model": model });
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
    Ok(Some(path))
}

/// Trains `model` on the tasks of `stream` in order with experience replay.
///
/// Each task runs `epochs` passes over its shuffled training set in batches
/// of `batch_size` current samples plus `n_replay` samples from the buffer,
/// so a task takes exactly `floor(|D_t| / batch_size) * epochs` steps. The
/// buffer is offered each current sample once, after the step that used it
/// during the first epoch. Both protocols are evaluated after every task.
pub fn train_continual(
    model: &mut TinyModel,
    stream: &TaskStream,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if stream.dim != model.config().dim {
        return Err(Error::Shape(format!(
            "stream has {} features, model expects {}",
            stream.dim,
            model.config().dim
        )));
    }
    if stream.num_classes() > model.classes() {
        return Err(Error::Shape(format!(
            "stream has {} classes, model head has {}",
            stream.num_classes(),
            model.classes()
        )));
    }
    let mut order_rng = rng.split(1);
    let mut replay_rng = rng.split(2);
    let mut buffer_rng = rng.split(3);
    let mut buffer = MemoryBuffer::new(cfg.buffer_capacity, cfg.buffer_policy);
    let mut class_rows = Vec::new();
    let mut task_rows = Vec::new();
    let mut steps_per_task = Vec::new();
    let mut diagnostics = Vec::new();
    let mut step = 0;
    for (t, data) in stream.tasks.iter().enumerate() {
        model.observe_tasks(&[t]);
        let per_epoch = data.train.len() / cfg.batch_size;
        if per_epoch == 0 {
            return arg_error(format!(
                "task {t} has {} samples, fewer than one batch of {}",
                data.train.len(),
                cfg.batch_size
            ));
        }
        let mut steps = 0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            order_rng.shuffle(&mut order);
            for b in 0..per_epoch {
                let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
                let current: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
                let batch: TaskBatch = sample_batch(&current, &buffer, &mut replay_rng, cfg.n_replay)?;
                let report = model.train_step(&batch, cfg.lr)?;
                if !report.loss.is_finite() || !model.is_finite() {
                    let dumped = dump_state(cfg, model, step, report.loss)?;
                    let at = dumped.map_or(String::new(), |p| format!("; state dumped to {}", p.display()));
                    return Err(Error::Numerical(format!(
                        "non-finite loss or parameters at step {step} (task {t}){at}"
                    )));
                }
                for (layer, d) in report.diag.iter().enumerate() {
                    diagnostics.push(DiagRow {
                        step,
                        task: t,
                        batch_in_task: steps,
                        layer,
                        loss: report.loss,
                        ce: report.ce,
                        l_ada: report.l_ada[layer],
                        grad_similarity: d.grad_similarity,
                        grad_magnitude: d.grad_magnitude,
                        batch_stat_norm: report.batch_stat_norm[layer],
                        pop_stat_norm: report.pop_stat_norm[layer],
                        eta: report.eta[layer],
                        r: batch.r,
                    });
                }
                if epoch == 0 && cfg.buffer_capacity > 0 {
                    for s in current {
                        buffer.offer(&mut buffer_rng, s.clone());
                    }
                }
                step += 1;
                steps += 1;
            }
        }
        steps_per_task.push(steps);
        class_rows.push(accuracy_row(model, stream, t + 1, Protocol::ClassIl)?);
        task_rows.push(accuracy_row(model, stream, t + 1, Protocol::TaskIl)?);
    }
    Ok(TrainOutcome {
        class_il: EvalReport::from_rows(class_rows)?,
        task_il: EvalReport::from_rows(task_rows)?,
        steps_per_task,
        diagnostics,
        buffer,
    })
}
