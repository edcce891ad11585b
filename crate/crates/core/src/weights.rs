//! Statistical weight of each task in EMA-style population statistics.
//!
//! A batch schedule assigns every batch index `i` in `1..=m_T` a momentum
//! `eta_i` and a current-task proportion `r_i`. Batch `i` of task `g(i)` puts
//! mass `r_i` on its own task and splits `1 - r_i` among replayed past tasks.
//! [`weights_closed_form`] evaluates the closed-form sum with the replay mass
//! divided by `T - 1`; [`weights_oracle`] unrolls the recursion batch by batch.

use serde::{Deserialize, Serialize};

use crate::error::{arg_error, Result};
use crate::momentum::MomentumSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSchedule {
    boundaries: Vec<usize>,
    eta: Vec<f64>,
    r: Vec<f64>,
}

impl BatchSchedule {
    /// `boundaries[t]` is the index of the last batch of task `t + 1`;
    /// `eta[i - 1]` and `r[i - 1]` belong to batch `i`.
    pub fn new(boundaries: Vec<usize>, eta: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        if boundaries.is_empty() {
            return arg_error("a schedule needs at least one task");
        }
        if boundaries[0] == 0 || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return arg_error("task boundaries must be positive and strictly increasing");
        }
        let m_t = *boundaries.last().unwrap();
        if eta.len() != m_t || r.len() != m_t {
            return arg_error(format!(
                "expected {m_t} momentum and ratio values, got {} and {}",
                eta.len(),
                r.len()
            ));
        }
        if let Some(bad) = eta.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
            return arg_error(format!("momentum values must lie in (0, 1), got {bad}"));
        }
        if let Some(bad) = r.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return arg_error(format!("current-task ratios must lie in (0, 1], got {bad}"));
        }
        if boundaries.len() == 1 && r.iter().any(|&x| x < 1.0) {
            return arg_error("replay (r < 1) is undefined with a single task");
        }
        Ok(Self { boundaries, eta, r })
    }

    pub fn from_fns(boundaries: Vec<usize>, eta: impl Fn(usize) -> f64, r: impl Fn(usize) -> f64) -> Result<Self> {
        let m_t = boundaries.last().copied().unwrap_or(0);
        Self::new(boundaries, (1..=m_t).map(&eta).collect(), (1..=m_t).map(&r).collect())
    }

    /// Momentum values drawn from `schedule`, one per batch.
    pub fn from_momentum(boundaries: Vec<usize>, schedule: MomentumSchedule, r: impl Fn(usize) -> f64) -> Result<Self> {
        let m_t = boundaries.last().copied().unwrap_or(0);
        Self::new(boundaries, schedule.take(m_t).collect(), (1..=m_t).map(&r).collect())
    }

    /// `tasks` segments of `m1` batches each.
    pub fn equal_boundaries(tasks: usize, m1: usize) -> Vec<usize> {
        (1..=tasks).map(|t| t * m1).collect()
    }

    pub fn tasks(&self) -> usize {
        self.boundaries.len()
    }
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }
    pub fn total_batches(&self) -> usize {
        *self.boundaries.last().unwrap()
    }
    pub fn eta(&self) -> &[f64] {
        &self.eta
    }
    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// Zero-based task index of 1-based batch `i`.
    pub fn task_of(&self, i: usize) -> usize {
        self.boundaries.partition_point(|&m| m < i)
    }

    fn segment(&self, t: usize) -> std::ops::RangeInclusive<usize> {
        let start = if t == 0 { 1 } else { self.boundaries[t - 1] + 1 };
        start..=self.boundaries[t]
    }

    fn constant_eta(&self) -> Option<f64> {
        let e = self.eta[0];
        self.eta.iter().all(|&x| x == e).then_some(e)
    }

    fn equal_segments(&self) -> Option<usize> {
        let m1 = self.boundaries[0];
        self.boundaries
            .iter()
            .enumerate()
            .all(|(t, &m)| m == (t + 1) * m1)
            .then_some(m1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub weights: Vec<f64>,
    /// Sum of the unnormalized weights.
    pub normalizer: f64,
}

impl TaskWeights {
    fn from_unnormalized(raw: Vec<f64>) -> Self {
        let normalizer: f64 = raw.iter().sum();
        Self {
            weights: raw.iter().map(|w| w / normalizer).collect(),
            normalizer,
        }
    }
}

/// How the replay share `1 - r_i` of a batch is divided among past tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplaySplit {
    /// Evenly over the `g(i) - 1` tasks seen before the batch's task.
    #[default]
    SeenTasks,
    /// `(1 - r_i) / (T - 1)` to each past task, as in the closed form.
    TotalTasks,
}

/// `prod_{j = i+1}^{m_T} (1 - eta_j)` for every `i` in `1..=m_T` (index `i - 1`).
fn suffix_decay(eta: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0; eta.len()];
    for i in (0..eta.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * (1.0 - eta[i + 1]);
    }
    out
}

/// Closed-form task weights.
pub fn weights_closed_form(sched: &BatchSchedule) -> TaskWeights {
    let tasks = sched.tasks();
    if tasks == 1 {
        return TaskWeights {
            weights: vec![1.0],
            normalizer: {
                let decay = suffix_decay(&sched.eta);
                sched.eta.iter().zip(&decay).map(|(e, p)| e * p).sum()
            },
        };
    }
    let decay = suffix_decay(&sched.eta);
    let m_t = sched.total_batches();
    // replay_tail[i - 1] = sum_{j >= i} eta_j (1 - r_j) decay_j
    let mut replay_tail = vec![0.0; m_t + 1];
    for i in (1..=m_t).rev() {
        let k = i - 1;
        replay_tail[k] = replay_tail[k + 1] + sched.eta[k] * (1.0 - sched.r[k]) * decay[k];
    }
    let split = (tasks - 1) as f64;
    let raw = (0..tasks)
        .map(|t| {
            let own: f64 = sched
                .segment(t)
                .map(|i| sched.eta[i - 1] * sched.r[i - 1] * decay[i - 1])
                .sum();
            own + replay_tail[sched.boundaries[t]] / split
        })
        .collect();
    TaskWeights::from_unnormalized(raw)
}

/// Unrolls the population update batch by batch with per-task coefficients.
pub fn weights_oracle(sched: &BatchSchedule) -> TaskWeights {
    weights_oracle_with(sched, ReplaySplit::SeenTasks)
}

pub fn weights_oracle_with(sched: &BatchSchedule, split: ReplaySplit) -> TaskWeights {
    let tasks = sched.tasks();
    let mut coeff = vec![0.0; tasks];
    for i in 1..=sched.total_batches() {
        let eta = sched.eta[i - 1];
        let r = sched.r[i - 1];
        for c in coeff.iter_mut() {
            *c *= 1.0 - eta;
        }
        let g = sched.task_of(i);
        coeff[g] += eta * r;
        let share = match split {
            ReplaySplit::SeenTasks if g > 0 => (1.0 - r) / g as f64,
            ReplaySplit::TotalTasks if tasks > 1 => (1.0 - r) / (tasks - 1) as f64,
            _ => 0.0,
        };
        for c in coeff.iter_mut().take(g) {
            *c += eta * share;
        }
    }
    TaskWeights::from_unnormalized(coeff)
}

/// `max_t w_t - min_t w_t`.
pub fn weight_spread(w: &TaskWeights) -> f64 {
    let max = w.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = w.weights.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn check_no_replay_constant_eta(sched: &BatchSchedule) -> Result<f64> {
    if sched.r.iter().any(|&r| r != 1.0) {
        return arg_error("requires r = 1 for every batch");
    }
    sched
        .constant_eta()
        .ok_or_else(|| crate::Error::Argument("requires a constant momentum".into()))
}

/// Exact weights for constant momentum without replay and equal segments:
/// `(eta_bar^{m_{T-t}} - eta_bar^{m_{T-t+1}}) / (1 - eta_bar^{m_T})`, with `m_0 = 0`.
pub fn cor1_exact(sched: &BatchSchedule) -> Result<Vec<f64>> {
    let eta = check_no_replay_constant_eta(sched)?;
    if sched.equal_segments().is_none() {
        return arg_error("requires equal segment lengths");
    }
    let bar = 1.0 - eta;
    let tasks = sched.tasks();
    let m = |k: usize| if k == 0 { 0 } else { sched.boundaries[k - 1] };
    let denom = 1.0 - bar.powi(m(tasks) as i32);
    Ok((1..=tasks)
        .map(|t| (bar.powi(m(tasks - t) as i32) - bar.powi(m(tasks - t + 1) as i32)) / denom)
        .collect())
}

/// Exponential approximation `eta_bar^{m_1 (T - t)}` of the normalized weights
/// (normalizer taken as 1) and its error bound `eta_bar^{m_1} / (1 - eta_bar^{m_1 T})`.
pub fn cor1_approx(sched: &BatchSchedule) -> Result<(Vec<f64>, f64)> {
    let eta = check_no_replay_constant_eta(sched)?;
    let m1 = sched
        .equal_segments()
        .ok_or_else(|| crate::Error::Argument("requires equal segment lengths".into()))?;
    let bar = 1.0 - eta;
    let tasks = sched.tasks();
    let approx = (1..=tasks).map(|t| bar.powi((m1 * (tasks - t)) as i32)).collect();
    let bar_m1 = bar.powi(m1 as i32);
    let bound = bar_m1 / (1.0 - bar.powi((m1 * tasks) as i32));
    Ok((approx, bound))
}

/// The proportion of current-task samples that balances all tasks, `1 / T`.
pub fn cor2_balanced_r(tasks: usize) -> f64 {
    1.0 / tasks as f64
}

/// The exact balancing proportion before the `eta_bar^{m_1}` term is dropped:
/// `1 / (T - eta_bar^{m_1} (T - 1))`.
pub fn cor2_balanced_r_exact(tasks: usize, eta_bar: f64, m1: usize) -> f64 {
    let t = tasks as f64;
    1.0 / (t - eta_bar.powi(m1 as i32) * (t - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ema(tasks: usize, m1: usize, eta: f64, r: f64) -> BatchSchedule {
        BatchSchedule::from_fns(BatchSchedule::equal_boundaries(tasks, m1), |_| eta, |_| r).unwrap()
    }

    fn cma(tasks: usize, m1: usize, r: f64) -> BatchSchedule {
        BatchSchedule::from_fns(
            BatchSchedule::equal_boundaries(tasks, m1),
            |i| 1.0 / (1.0 + i as f64),
            |_| r,
        )
        .unwrap()
    }

    #[test]
    fn single_task_owns_everything() {
        let s = ema(1, 7, 0.3, 1.0);
        assert_eq!(weights_closed_form(&s).weights, vec![1.0]);
        assert_eq!(weights_oracle(&s).weights, vec![1.0]);
        assert!(BatchSchedule::from_fns(vec![5], |_| 0.1, |_| 0.5).is_err());
    }

    #[test]
    fn two_task_ema_values() {
        // Brute force: w1 = 0.9^5 - 0.9^10, w2 = 1 - 0.9^5, normalized.
        let (w1, w2) = (0.9f64.powi(5) - 0.9f64.powi(10), 1.0 - 0.9f64.powi(5));
        let s = ema(2, 5, 0.1, 1.0);
        let closed = weights_closed_form(&s);
        let oracle = weights_oracle(&s);
        for (w, want) in [(&closed, w1 / (w1 + w2)), (&oracle, w1 / (w1 + w2))] {
            assert!((w.weights[0] - want).abs() < 1e-12);
        }
        assert!((closed.weights[0] - 0.371263).abs() < 1e-6);
        assert!((closed.weights[1] - 0.628737).abs() < 1e-6);
    }

    #[test]
    fn cma_without_replay_is_balanced() {
        for tasks in [2, 3, 5, 8] {
            for m1 in [1, 4, 25] {
                let s = cma(tasks, m1, 1.0);
                assert!(weight_spread(&weights_closed_form(&s)) <= 1e-12);
                assert!(weight_spread(&weights_oracle(&s)) <= 1e-12);
            }
        }
    }

    #[test]
    fn cma_with_replay_is_not_balanced() {
        // With r = 0.5 and equal segments of length L the closed form gives
        // w_t ∝ rL + (1-r)(T-t)L/(T-1): (1, 0.75, 0.5) / 2.25 for T = 3.
        let s = cma(3, 10, 0.5);
        let w = weights_closed_form(&s).weights;
        for (got, want) in w.iter().zip([1.0 / 2.25, 0.75 / 2.25, 0.5 / 2.25]) {
            assert!((got - want).abs() < 1e-12, "{w:?}");
        }
        // Seen-task split: task 1 batches cannot replay, (1.25, 0.75, 0.5) / 2.5.
        let w = weights_oracle(&s).weights;
        for (got, want) in w.iter().zip([0.5, 0.3, 0.2]) {
            assert!((got - want).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn closed_form_matches_total_split_oracle_everywhere() {
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..200 {
            let tasks = 2 + rng.below(6);
            let mut b = vec![];
            let mut m = 0;
            for _ in 0..tasks {
                m += 1 + rng.below(30);
                b.push(m);
            }
            let eta: Vec<f64> = (0..m).map(|_| rng.uniform_range(0.01, 0.99)).collect();
            let r: Vec<f64> = (0..m).map(|_| rng.uniform_range(0.05, 1.0)).collect();
            let s = BatchSchedule::new(b, eta, r).unwrap();
            let c = weights_closed_form(&s);
            let o = weights_oracle_with(&s, ReplaySplit::TotalTasks);
            for (x, y) in c.weights.iter().zip(&o.weights) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cor1_values() {
        let s = ema(5, 20, 0.1, 1.0);
        let (approx, bound) = cor1_approx(&s).unwrap();
        for (t, a) in approx.iter().enumerate() {
            assert_eq!(*a, 0.9f64.powi(20 * (4 - t as i32)));
        }
        let exact = cor1_exact(&s).unwrap();
        let oracle = weights_oracle(&s).weights;
        for t in 0..5 {
            assert!((exact[t] - oracle[t]).abs() <= 1e-12);
            assert!((exact[t] - approx[t]).abs() <= bound);
        }
        assert!(cor1_approx(&ema(3, 5, 0.1, 0.5)).is_err());
        let uneven = BatchSchedule::from_fns(vec![3, 10], |_| 0.1, |_| 1.0).unwrap();
        assert!(cor1_approx(&uneven).is_err());
    }

    #[test]
    fn cor2_values() {
        assert_eq!(cor2_balanced_r(10), 0.1);
        let exact = cor2_balanced_r_exact(10, 0.9, 20);
        let want = 1.0 / (10.0 - 0.9f64.powi(20) * 9.0);
        assert_eq!(exact, want);
        assert!((exact - 0.112286).abs() < 1e-6, "{exact}");
    }

    #[test]
    fn spread_basics() {
        let w = TaskWeights {
            weights: vec![0.7, 0.3],
            normalizer: 1.0,
        };
        assert!((weight_spread(&w) - 0.4).abs() < 1e-15);
        let w = TaskWeights {
            weights: vec![0.25; 4],
            normalizer: 1.0,
        };
        assert_eq!(weight_spread(&w), 0.0);
    }

    #[test]
    fn task_of_maps_segments() {
        let s = BatchSchedule::from_fns(vec![2, 5, 6], |_| 0.1, |_| 1.0).unwrap();
        let g: Vec<usize> = (1..=6).map(|i| s.task_of(i)).collect();
        assert_eq!(g, vec![0, 0, 1, 1, 1, 2]);
    }

    #[test]
    fn adaptive_schedule_endpoints() {
        let b = BatchSchedule::equal_boundaries(4, 15);
        let r = |i: usize| if i > 45 { 0.4 } else { 1.0 };
        let k1 = BatchSchedule::from_momentum(b.clone(), MomentumSchedule::adab2n(0.1, 1.0).unwrap(), r).unwrap();
        let e = BatchSchedule::from_fns(b.clone(), |_| 0.1, r).unwrap();
        assert_eq!(weights_oracle(&k1), weights_oracle(&e));
        let k0 = BatchSchedule::from_momentum(b.clone(), MomentumSchedule::adab2n(0.1, 0.0).unwrap(), r).unwrap();
        let c = BatchSchedule::from_fns(b, |i| 1.0 / (1.0 + i as f64), r).unwrap();
        for (x, y) in weights_oracle(&k0)
            .weights
            .iter()
            .zip(weights_oracle(&c).weights.iter())
        {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
