//! Replay memory (reservoir or class-balanced ring) and batch assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::stream::Sample;
use crate::rng::Rng;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferPolicy {
    Reservoir,
    Ring,
}

impl std::str::FromStr for BufferPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reservoir" => Ok(BufferPolicy::Reservoir),
            "ring" => Ok(BufferPolicy::Ring),
            other => Err(Error::Argument(format!("unknown buffer policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    sample: Sample,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    policy: BufferPolicy,
    entries: Vec<Slot>,
    seen: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, policy: BufferPolicy) -> Self {
        Self {
            capacity,
            policy,
            entries: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn seen(&self) -> u64 {
        self.seen
    }
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter().map(|s| &s.sample)
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.entries {
            *counts.entry(s.sample.label).or_insert(0) += 1;
        }
        counts
    }

    /// Offers one sample to the buffer.
    ///
    /// Reservoir: once full, the sample replaces a uniformly chosen slot with
    /// probability `capacity / seen`. Ring: once full, the oldest sample of
    /// the most represented class is evicted, preferring the offered class on ties.
    pub fn offer(&mut self, rng: &mut Rng, sample: Sample) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        let slot = Slot {
            sample,
            stamp: self.seen,
        };
        if self.entries.len() < self.capacity {
            self.entries.push(slot);
            return;
        }
        match self.policy {
            BufferPolicy::Reservoir => {
                let j = rng.below(self.seen as usize);
                if j < self.capacity {
                    self.entries[j] = slot;
                }
            }
            BufferPolicy::Ring => {
                let counts = self.class_counts();
                let max = counts.values().copied().max().unwrap_or(0);
                let own = counts.get(&slot.sample.label).copied().unwrap_or(0);
                let victim_class = if own == max {
                    slot.sample.label
                } else {
                    *counts.iter().find(|&(_, &c)| c == max).unwrap().0
                };
                let victim = self
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.sample.label == victim_class)
                    .min_by_key(|(_, s)| s.stamp)
                    .map(|(i, _)| i)
                    .unwrap();
                self.entries[victim] = slot;
            }
        }
    }
}

/// One training batch: current-task samples first, then replayed ones.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub x: Tensor3,
    pub labels: Vec<usize>,
    pub tasks: Vec<usize>,
    /// `(task, N_t)` for every task present, in task order.
    pub counts: Vec<(usize, usize)>,
    /// Proportion of current-task samples, `N_t / N`.
    pub r: f64,
    pub n_current: usize,
}

impl TaskBatch {
    pub fn from_samples(samples: &[&Sample], n_current: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let dim = samples[0].x.len();
        let mut data = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            if s.x.len() != dim {
                return Err(Error::Shape("samples of different dimension in one batch".into()));
            }
            data.extend_from_slice(&s.x);
        }
        let x = Tensor3::from_vec(samples.len(), dim, 1, data)?;
        let labels = samples.iter().map(|s| s.label).collect();
        let tasks: Vec<usize> = samples.iter().map(|s| s.task).collect();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &t in &tasks {
            *counts.entry(t).or_insert(0) += 1;
        }
        Ok(Self {
            x,
            labels,
            tasks,
            counts: counts.into_iter().collect(),
            r: n_current as f64 / samples.len() as f64,
            n_current,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn is_single_task(&self) -> bool {
        self.counts.len() == 1
    }
}

/// Draws `n_replay` samples of tasks before `task` from the buffer, split
/// evenly across those tasks (remainder to randomly chosen tasks). Within a
/// task, draws are without replacement when it holds enough samples.
pub fn draw_replay<'a>(buf: &'a MemoryBuffer, rng: &mut Rng, task: usize, n_replay: usize) -> Vec<&'a Sample> {
    if n_replay == 0 {
        return Vec::new();
    }
    let mut by_task: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in buf.samples().filter(|s| s.task < task) {
        by_task.entry(s.task).or_default().push(s);
    }
    if by_task.is_empty() {
        return Vec::new();
    }
    let pools: Vec<Vec<&Sample>> = by_task.into_values().collect();
    let k = pools.len();
    let mut quota = vec![n_replay / k; k];
    let mut order: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut order);
    for &i in order.iter().take(n_replay % k) {
        quota[i] += 1;
    }
    let mut out = Vec::with_capacity(n_replay);
    for (pool, q) in pools.iter().zip(quota) {
        if q <= pool.len() {
            out.extend(rng.choose_distinct(pool.len(), q).into_iter().map(|i| pool[i]));
        } else {
            out.extend((0..q).map(|_| pool[rng.below(pool.len())]));
        }
    }
    out
}

/// Concatenates the current-task samples with replayed ones.
pub fn sample_batch(current: &[&Sample], buf: &MemoryBuffer, rng: &mut Rng, n_replay: usize) -> Result<TaskBatch> {
    let task = current
        .first()
        .map(|s| s.task)
        .ok_or_else(|| Error::Shape("no current-task samples".into()))?;
    let mut all: Vec<&Sample> = current.to_vec();
    all.extend(draw_replay(buf, rng, task, n_replay));
    TaskBatch::from_samples(&all, current.len())
}
