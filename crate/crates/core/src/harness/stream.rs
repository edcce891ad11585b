//! Synthetic task streams: isotropic Gaussian class blobs whose centers drift
//! along a shared direction from one task to the next.

use serde::{Deserialize, Serialize};

use crate::error::{arg_error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub classes_per_task: usize,
    pub dim: usize,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks.len() * self.classes_per_task
    }

    /// Classes owned by task `t`.
    pub fn classes_of(&self, t: usize) -> std::ops::Range<usize> {
        t * self.classes_per_task..(t + 1) * self.classes_per_task
    }

    /// All tasks merged into one, with every sample relabelled as task 0.
    /// Used as the joint-training reference.
    pub fn joint(&self) -> TaskStream {
        let relabel = |s: &Sample| Sample { task: 0, ..s.clone() };
        let train = self.tasks.iter().flat_map(|t| t.train.iter().map(relabel)).collect();
        let test = self.tasks.iter().flat_map(|t| t.test.iter().map(relabel)).collect();
        TaskStream {
            tasks: vec![TaskData { train, test }],
            classes_per_task: self.num_classes(),
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Test samples per class.
    pub n_test_per_class: usize,
    pub mean_scale: f64,
    pub task_drift: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 2,
            dim: 16,
            n_per_class: 100,
            n_test_per_class: 100,
            mean_scale: 3.0,
            task_drift: 2.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 1 || self.classes_per_task < 1 || self.dim < 1 || self.n_per_class < 1 {
            return arg_error("stream counts must all be >= 1");
        }
        if self.n_test_per_class < 1 {
            return arg_error("n_test_per_class must be >= 1");
        }
        if !(self.mean_scale >= 0.0) || !(self.task_drift >= 0.0) {
            return arg_error("mean_scale and task_drift must be >= 0");
        }
        Ok(())
    }
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Builds the stream. Class `k` of task `t` is centered at
/// `mean_scale * u_{t,k} + task_drift * t * v` for random unit vectors
/// `u_{t,k}` and a shared drift direction `v`, with unit isotropic noise.
pub fn make_gaussian_stream(rng: &mut Rng, cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let drift = random_unit(rng, cfg.dim);
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut train = Vec::with_capacity(cfg.classes_per_task * cfg.n_per_class);
        let mut test = Vec::with_capacity(cfg.classes_per_task * cfg.n_test_per_class);
        for k in 0..cfg.classes_per_task {
            let label = t * cfg.classes_per_task + k;
            let dir = random_unit(rng, cfg.dim);
            let center: Vec<f64> = dir
                .iter()
                .zip(&drift)
                .map(|(u, v)| cfg.mean_scale * u + cfg.task_drift * t as f64 * v)
                .collect();
            let draw = |rng: &mut Rng| Sample {
                x: center.iter().map(|m| rng.gaussian(*m, 1.0)).collect(),
                label,
                task: t,
            };
            for _ in 0..cfg.n_per_class {
                train.push(draw(rng));
            }
            for _ in 0..cfg.n_test_per_class {
                test.push(draw(rng));
            }
        }
        tasks.push(TaskData { train, test });
    }
    Ok(TaskStream {
        tasks,
        classes_per_task: cfg.classes_per_task,
        dim: cfg.dim,
    })
}
