//! Normalization layers for continual learning: plain BN, continual
//! normalization (GN without affine, then BN), and the adaptive-balance layer.
//!
//! In adaptive mode the training-time statistics are a Dirichlet-weighted
//! mixture of per-task statistics, with task `t` weighted by
//! `(phi_t + N_t) / (sum_present phi + N)` and `phi = exp(psi)` learned per task.
//! The mixture is formed over first and second moments, so with `phi -> 0`
//! it reproduces the full-batch statistics exactly. The layer also reports
//! `l_ada`, the squared distance from the mixed statistics to the population
//! statistics after this batch's update.
//!
//! All backward passes are written by hand; `gradcheck` verifies them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_error, Error, Result};
use crate::momentum::{MomentumSchedule, PopulationStats, ScheduleKind, DEFAULT_ETA_TILDE, DEFAULT_KAPPA};
use crate::stats::{
    affine, bn_stats, check_groups, gn_normalize, gn_stats, normalize, slice_stats, AffineParams, GroupStats, Stats,
    DEFAULT_EPS,
};
use crate::tensor::Tensor3;

pub const PSI_MIN: f64 = -20.0;
pub const PSI_MAX: f64 = 20.0;
pub const DEFAULT_GROUPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Bn,
    Cn,
    Adab2n,
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::Bn => "bn",
            NormMode::Cn => "cn",
            NormMode::Adab2n => "adab2n",
        })
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormMode::Bn),
            "cn" => Ok(NormMode::Cn),
            "adab2n" => Ok(NormMode::Adab2n),
            other => arg_error(format!("unknown normalization mode `{other}`")),
        }
    }
}

/// Layer hyperparameters. `schedule` overrides the momentum schedule, which
/// otherwise is the adaptive recurrence for [`NormMode::Adab2n`] and EMA for
/// the other modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerConfig {
    pub mode: NormMode,
    pub eps: f64,
    pub eta_tilde: f64,
    pub kappa: f64,
    pub schedule: Option<ScheduleKind>,
    pub groups: usize,
    pub lambda: f64,
    /// Let the `l_ada` gradient reach the layer input, not only `psi`.
    pub ada_grad_to_input: bool,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            mode: NormMode::Bn,
            eps: DEFAULT_EPS,
            eta_tilde: DEFAULT_ETA_TILDE,
            kappa: DEFAULT_KAPPA,
            schedule: None,
            groups: DEFAULT_GROUPS,
            lambda: 0.0,
            ada_grad_to_input: true,
        }
    }
}

impl LayerConfig {
    pub fn schedule_kind(&self) -> ScheduleKind {
        self.schedule.unwrap_or(match self.mode {
            NormMode::Adab2n => ScheduleKind::Adab2n,
            NormMode::Bn | NormMode::Cn => ScheduleKind::Ema,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return arg_error(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return arg_error(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.groups < 1 {
            return arg_error("groups must be >= 1");
        }
        MomentumSchedule::from_kind(self.schedule_kind(), self.eta_tilde, self.kappa).map(|_| ())
    }
}

/// Learnable log-concentrations, one per task seen so far.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Concentration {
    pub psi: Vec<f64>,
}

impl Concentration {
    pub fn len(&self) -> usize {
        self.psi.len()
    }
    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// `exp(psi_t)` with `psi_t` clamped to `[PSI_MIN, PSI_MAX]`.
    pub fn phi(&self, task: usize) -> f64 {
        self.psi[task].clamp(PSI_MIN, PSI_MAX).exp()
    }

    /// Grows the vector so that `task` is covered; new entries start at 0.
    pub fn observe(&mut self, task: usize) {
        if task >= self.psi.len() {
            self.psi.resize(task + 1, 0.0);
        }
    }

    fn psi_is_active(&self, task: usize) -> bool {
        let p = self.psi[task];
        (PSI_MIN..=PSI_MAX).contains(&p)
    }
}

/// Samples of one task inside a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSlice {
    pub task: usize,
    pub samples: Vec<usize>,
}

/// Groups batch positions by task id, in increasing task order.
pub fn group_by_task(tasks: &[usize]) -> Vec<TaskSlice> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in tasks.iter().enumerate() {
        map.entry(t).or_default().push(i);
    }
    map.into_iter()
        .map(|(task, samples)| TaskSlice { task, samples })
        .collect()
}

/// Statistics of each task present in the batch, over that task's samples only.
pub fn task_conditional_stats(a: &Tensor3, tasks: &[usize]) -> Result<Vec<(usize, Stats)>> {
    if tasks.len() != a.n() {
        return Err(Error::Shape(format!(
            "{} task ids for a batch of {}",
            tasks.len(),
            a.n()
        )));
    }
    group_by_task(tasks)
        .into_iter()
        .map(|s| Ok((s.task, slice_stats(a, &s.samples)?)))
        .collect()
}

/// Posterior-mean task weights `(phi_t + N_t) / (sum phi + N)` over the tasks
/// present in `counts`, given as `(task, N_t)` pairs.
pub fn dirichlet_weights(conc: &Concentration, counts: &[(usize, usize)], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return arg_error("batch size must be positive");
    }
    if counts.iter().map(|&(_, c)| c).sum::<usize>() != n {
        return arg_error("task counts must sum to the batch size");
    }
    if let Some(&(t, _)) = counts.iter().find(|&&(t, _)| t >= conc.len()) {
        return Err(Error::State(format!("no concentration entry for task {t}")));
    }
    let phi_total: f64 = counts.iter().map(|&(t, _)| conc.phi(t)).sum();
    let denom = phi_total + n as f64;
    Ok(counts.iter().map(|&(t, c)| (conc.phi(t) + c as f64) / denom).collect())
}

/// Cosine similarity of two flattened tensors; 0 if either is the zero vector.
pub fn gradient_similarity(d_a: &Tensor3, a_prime: &Tensor3) -> Result<f64> {
    let dot = d_a.dot(a_prime)?;
    let denom = d_a.norm() * a_prime.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
struct MixGroup {
    task: usize,
    samples: Vec<usize>,
    weight: f64,
    stats: Stats,
}

#[derive(Debug, Clone)]
struct GnCache {
    stats: GroupStats,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input_shape: (usize, usize, usize),
    /// Input of the batch-statistics stage (the GN output for CN).
    x: Tensor3,
    /// Normalized representation before the affine transform.
    y: Tensor3,
    mixed: Stats,
    inv_std: Vec<f64>,
    groups: Vec<MixGroup>,
    /// `sum_present phi + N`, adaptive mode only.
    weight_denom: f64,
    target: Option<Stats>,
    gn: Option<GnCache>,
    gamma: Vec<f64>,
}

impl LayerCache {
    /// The normalized representation `a'`.
    pub fn normalized(&self) -> &Tensor3 {
        &self.y
    }
    /// The statistics used to normalize this batch.
    pub fn mixed_stats(&self) -> &Stats {
        &self.mixed
    }
    /// Task weights of the mixture, as `(task, weight)` pairs.
    pub fn task_weights(&self) -> Vec<(usize, f64)> {
        self.groups.iter().map(|g| (g.task, g.weight)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_input: Tensor3,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub d_psi: Vec<f64>,
}

/// Result of a stateful training forward pass.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub out: Tensor3,
    pub cache: LayerCache,
    pub l_ada: f64,
    /// Momentum used for the population update.
    pub eta: f64,
    /// Full-batch statistics fed to the population update.
    pub batch_stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    config: LayerConfig,
    channels: usize,
    pub affine: AffineParams,
    pub conc: Concentration,
    pop: PopulationStats,
    sched: MomentumSchedule,
}

impl NormLayer {
    pub fn new(channels: usize, config: LayerConfig) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::Shape("a normalization layer needs at least one channel".into()));
        }
        if config.mode == NormMode::Cn {
            check_groups(channels, config.groups)?;
        }
        let sched = MomentumSchedule::from_kind(config.schedule_kind(), config.eta_tilde, config.kappa)?;
        Ok(Self {
            channels,
            affine: AffineParams::identity(channels),
            conc: Concentration::default(),
            pop: PopulationStats::new(channels),
            sched,
            config,
        })
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }
    pub fn mode(&self) -> NormMode {
        self.config.mode
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn population(&self) -> &PopulationStats {
        &self.pop
    }
    pub fn schedule(&self) -> &MomentumSchedule {
        &self.sched
    }

    /// The input of the batch-statistics stage: `a` itself, or its group
    /// normalization for CN.
    fn stage_input(&self, a: &Tensor3) -> Result<(Tensor3, Option<GnCache>)> {
        match self.config.mode {
            NormMode::Cn => {
                let stats = gn_stats(a, self.config.groups)?;
                let z = gn_normalize(a, &stats, self.config.eps)?;
                Ok((z, Some(GnCache { stats })))
            }
            NormMode::Bn | NormMode::Adab2n => Ok((a.clone(), None)),
        }
    }

    /// Training forward pass: computes this batch's statistics, advances the
    /// momentum schedule, updates the population and normalizes.
    pub fn forward_train(&mut self, a: &Tensor3, tasks: &[usize]) -> Result<TrainOutput> {
        self.check_input(a, tasks)?;
        for &t in tasks {
            self.conc.observe(t);
        }
        let (x, gn) = self.stage_input(a)?;
        let batch_stats = bn_stats(&x);
        let eta = self.sched.next_eta();
        self.pop.update(&batch_stats, eta)?;
        let target = self.pop.stats().clone();
        let (out, mut cache, l_ada) = self.normalize_stage(x, tasks, Some(target))?;
        cache.gn = gn;
        cache.input_shape = a.shape();
        Ok(TrainOutput {
            out,
            cache,
            l_ada,
            eta,
            batch_stats,
        })
    }

    /// Training-mode forward pass without touching any state, normalizing
    /// against a fixed `l_ada` target. Used for finite-difference checks.
    pub fn forward_with_target(
        &self,
        a: &Tensor3,
        tasks: &[usize],
        target: Option<&Stats>,
    ) -> Result<(Tensor3, LayerCache, f64)> {
        self.check_input(a, tasks)?;
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.conc.len()) {
            if self.config.mode == NormMode::Adab2n {
                return Err(Error::State(format!("task {t} has no concentration entry")));
            }
        }
        let (x, gn) = self.stage_input(a)?;
        let (out, mut cache, l_ada) = self.normalize_stage(x, tasks, target.cloned())?;
        cache.gn = gn;
        cache.input_shape = a.shape();
        Ok((out, cache, l_ada))
    }

    fn check_input(&self, a: &Tensor3, tasks: &[usize]) -> Result<()> {
        if a.c() != self.channels {
            return Err(Error::Shape(format!(
                "layer has {} channels, input has {}",
                self.channels,
                a.c()
            )));
        }
        if tasks.len() != a.n() {
            return Err(Error::Shape(format!(
                "{} task ids for a batch of {}",
                tasks.len(),
                a.n()
            )));
        }
        Ok(())
    }

    fn normalize_stage(
        &self,
        x: Tensor3,
        tasks: &[usize],
        target: Option<Stats>,
    ) -> Result<(Tensor3, LayerCache, f64)> {
        let eps = self.config.eps;
        let (mixed, groups, weight_denom) = match self.config.mode {
            NormMode::Bn | NormMode::Cn => {
                let stats = bn_stats(&x);
                let group = MixGroup {
                    task: 0,
                    samples: (0..x.n()).collect(),
                    weight: 1.0,
                    stats: stats.clone(),
                };
                (stats, vec![group], x.n() as f64)
            }
            NormMode::Adab2n => self.mix_task_stats(&x, tasks)?,
        };
        let y = normalize(&x, &mixed, eps)?;
        let out = affine(&y, &self.affine)?;
        let l_ada = match (&target, self.config.mode) {
            (Some(t), NormMode::Adab2n) => mixed.distance_sq(t),
            _ => 0.0,
        };
        let inv_std = mixed.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let cache = LayerCache {
            input_shape: x.shape(),
            x,
            y,
            mixed,
            inv_std,
            groups,
            weight_denom,
            target,
            gn: None,
            gamma: self.affine.gamma.clone(),
        };
        Ok((out, cache, l_ada))
    }

    fn mix_task_stats(&self, x: &Tensor3, tasks: &[usize]) -> Result<(Stats, Vec<MixGroup>, f64)> {
        let slices = group_by_task(tasks);
        let counts: Vec<(usize, usize)> = slices.iter().map(|s| (s.task, s.samples.len())).collect();
        let weights = dirichlet_weights(&self.conc, &counts, x.n())?;
        let phi_total: f64 = counts.iter().map(|&(t, _)| self.conc.phi(t)).sum();
        let mut groups = Vec::with_capacity(slices.len());
        for (slice, weight) in slices.into_iter().zip(weights) {
            let stats = slice_stats(x, &slice.samples)?;
            groups.push(MixGroup {
                task: slice.task,
                samples: slice.samples,
                weight,
                stats,
            });
        }
        let c = x.c();
        let mut mixed = Stats::zeros(c);
        for ch in 0..c {
            let mean: f64 = groups.iter().map(|g| g.weight * g.stats.mean[ch]).sum();
            let var: f64 = groups
                .iter()
                .map(|g| {
                    let dm = g.stats.mean[ch] - mean;
                    g.weight * (g.stats.var[ch] + dm * dm)
                })
                .sum();
            mixed.mean[ch] = mean;
            mixed.var[ch] = var;
        }
        Ok((mixed, groups, phi_total + x.n() as f64))
    }

    /// Gradients of `upstream + lambda * l_ada` with the population target
    /// held constant.
    pub fn backward(&self, cache: &LayerCache, d_out: &Tensor3, lambda: f64) -> Result<LayerGrads> {
        let x = &cache.x;
        let (n, c, d) = x.shape();
        d_out
            .expect_shape(x.shape())
            .map_err(|e| Error::State(format!("gradient does not match cache: {e}")))?;
        let y = &cache.y;
        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        // Gradient w.r.t. y, and the per-channel sums the statistics need.
        let mut gy = vec![0.0; n * c * d];
        let mut sum_gy = vec![0.0; c];
        let mut sum_gy_y = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let g = cache.gamma[ch];
                for p in 0..d {
                    let k = x.index(i, ch, p);
                    let go = d_out.data()[k];
                    d_gamma[ch] += go * y.data()[k];
                    d_beta[ch] += go;
                    gy[k] = g * go;
                    sum_gy[ch] += gy[k];
                    sum_gy_y[ch] += gy[k] * y.data()[k];
                }
            }
        }
        let adaptive = cache.target.is_some() && self.config.mode == NormMode::Adab2n;
        let mut g_mean_norm = vec![0.0; c];
        let mut g_var_norm = vec![0.0; c];
        let mut g_mean_ada = vec![0.0; c];
        let mut g_var_ada = vec![0.0; c];
        for ch in 0..c {
            let s = cache.inv_std[ch];
            g_mean_norm[ch] = -s * sum_gy[ch];
            g_var_norm[ch] = -0.5 * s * s * sum_gy_y[ch];
            if adaptive && lambda != 0.0 {
                let t = cache.target.as_ref().unwrap();
                g_mean_ada[ch] = 2.0 * lambda * (cache.mixed.mean[ch] - t.mean[ch]);
                g_var_ada[ch] = 2.0 * lambda * (cache.mixed.var[ch] - t.var[ch]);
            }
        }
        let to_input = self.config.ada_grad_to_input;
        let mut dx = vec![0.0; n * c * d];
        for grp in &cache.groups {
            let count = (grp.samples.len() * d) as f64;
            for ch in 0..c {
                let (mut gm, mut gv) = (g_mean_norm[ch], g_var_norm[ch]);
                if to_input {
                    gm += g_mean_ada[ch];
                    gv += g_var_ada[ch];
                }
                let scale = grp.weight / count;
                let mu = cache.mixed.mean[ch];
                for &i in &grp.samples {
                    for p in 0..d {
                        let k = x.index(i, ch, p);
                        dx[k] = cache.inv_std[ch] * gy[k] + scale * (gm + 2.0 * (x.data()[k] - mu) * gv);
                    }
                }
            }
        }
        let mut d_psi = vec![0.0; self.conc.len()];
        if self.config.mode == NormMode::Adab2n {
            // dL/dw_t up to a task-independent constant, which cancels below.
            let gw: Vec<f64> = cache
                .groups
                .iter()
                .map(|grp| {
                    (0..c)
                        .map(|ch| {
                            let gm = g_mean_norm[ch] + g_mean_ada[ch];
                            let gv = g_var_norm[ch] + g_var_ada[ch];
                            let dm = grp.stats.mean[ch] - cache.mixed.mean[ch];
                            gm * dm + gv * (grp.stats.var[ch] + dm * dm)
                        })
                        .sum()
                })
                .collect();
            let mean_gw: f64 = cache.groups.iter().zip(&gw).map(|(g, v)| g.weight * v).sum();
            for (grp, v) in cache.groups.iter().zip(&gw) {
                if grp.task < d_psi.len() && self.conc.psi_is_active(grp.task) {
                    d_psi[grp.task] = self.conc.phi(grp.task) / cache.weight_denom * (v - mean_gw);
                }
            }
        }
        let mut d_input = Tensor3::from_vec(n, c, d, dx)?;
        if let Some(gn) = &cache.gn {
            d_input = gn_backward(x, &gn.stats, &d_input, self.config.eps)?;
        }
        d_input.expect_shape(cache.input_shape)?;
        Ok(LayerGrads {
            d_input,
            d_gamma,
            d_beta,
            d_psi,
        })
    }

    /// Evaluation forward pass with the population statistics. Pure.
    pub fn forward_eval(&self, a: &Tensor3) -> Result<Tensor3> {
        if a.c() != self.channels {
            return Err(Error::Shape(format!(
                "layer has {} channels, input has {}",
                self.channels,
                a.c()
            )));
        }
        if !self.pop.is_initialized() {
            return Err(Error::State(
                "population statistics are uninitialized; run at least one training batch".into(),
            ));
        }
        let (x, _) = self.stage_input(a)?;
        let y = normalize(&x, self.pop.stats(), self.config.eps)?;
        affine(&y, &self.affine)
    }

    /// Plain gradient step on `gamma`, `beta` and `psi`.
    pub fn apply_grads(&mut self, grads: &LayerGrads, lr: f64) {
        for (p, g) in self.affine.gamma.iter_mut().zip(&grads.d_gamma) {
            *p -= lr * g;
        }
        for (p, g) in self.affine.beta.iter_mut().zip(&grads.d_beta) {
            *p -= lr * g;
        }
        if self.config.mode == NormMode::Adab2n {
            for (p, g) in self.conc.psi.iter_mut().zip(&grads.d_psi) {
                *p -= lr * g;
            }
        }
    }
}

/// Backward pass of GN without affine: `x` is the GN output.
fn gn_backward(z: &Tensor3, stats: &GroupStats, dz: &Tensor3, eps: f64) -> Result<Tensor3> {
    let (n, c, d) = z.shape();
    let k = c / stats.groups;
    let count = (k * d) as f64;
    let mut out = vec![0.0; n * c * d];
    for i in 0..n {
        for g in 0..stats.groups {
            let (_, v) = stats.get(i, g);
            let s = 1.0 / (v + eps).sqrt();
            let chans = g * k..(g + 1) * k;
            let mut sum_dz = 0.0;
            let mut sum_dz_z = 0.0;
            for ch in chans.clone() {
                for p in 0..d {
                    let idx = z.index(i, ch, p);
                    sum_dz += dz.data()[idx];
                    sum_dz_z += dz.data()[idx] * z.data()[idx];
                }
            }
            let (mean_dz, mean_dz_z) = (sum_dz / count, sum_dz_z / count);
            for ch in chans {
                for p in 0..d {
                    let idx = z.index(i, ch, p);
                    out[idx] = s * (dz.data()[idx] - mean_dz - z.data()[idx] * mean_dz_z);
                }
            }
        }
    }
    Tensor3::from_vec(n, c, d, out)
}

/// GN (no affine) followed by the layer's BN stage in training mode.
pub fn cn_forward(a: &Tensor3, layer: &mut NormLayer) -> Result<Tensor3> {
    if layer.mode() != NormMode::Cn {
        return arg_error("cn_forward needs a layer in CN mode");
    }
    let tasks = vec![0; a.n()];
    Ok(layer.forward_train(a, &tasks)?.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ada(lambda: f64) -> LayerConfig {
        LayerConfig {
            mode: NormMode::Adab2n,
            lambda,
            ..LayerConfig::default()
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn task_stats_hand_example() {
        let a = Tensor3::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = task_conditional_stats(&a, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s[0].1.mean, vec![1.5]);
        assert_eq!(s[1].1.mean, vec![3.5]);
        assert_eq!(s[0].1.var, vec![0.25]);
        assert_eq!(s[1].1.var, vec![0.25]);
        let whole = task_conditional_stats(&a, &[2; 4]).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].1, bn_stats(&a));
    }

    #[test]
    fn dirichlet_examples() {
        let conc = Concentration { psi: vec![0.0, 0.0] };
        let w = dirichlet_weights(&conc, &[(0, 6), (1, 4)], 10).unwrap();
        assert!(close(&w, &[7.0 / 12.0, 5.0 / 12.0], 1e-15));
        let low = Concentration { psi: vec![-1e3, -1e3] };
        let w = dirichlet_weights(&low, &[(0, 6), (1, 4)], 10).unwrap();
        assert!(close(&w, &[0.6, 0.4], 1e-9));
        let w = dirichlet_weights(&conc, &[(0, 5), (1, 5)], 10).unwrap();
        assert_eq!(w[0], w[1]);
        assert!(dirichlet_weights(&conc, &[], 0).is_err());
        assert!(dirichlet_weights(&conc, &[(0, 3)], 4).is_err());
        assert!(matches!(dirichlet_weights(&conc, &[(5, 4)], 4), Err(Error::State(_))));
    }

    #[test]
    fn absent_tasks_are_renormalized_away() {
        let conc = Concentration {
            psi: vec![3.0, 0.0, 1.0],
        };
        let w = dirichlet_weights(&conc, &[(1, 2), (2, 2)], 4).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_task_matches_bn_for_any_psi() {
        let mut rng = Rng::new(4);
        let x = Tensor3::randn(&mut rng, 6, 3, 2, 1.0, 2.0).unwrap();
        let mut bn = NormLayer::new(3, LayerConfig::default()).unwrap();
        let mut ad = NormLayer::new(3, ada(0.0)).unwrap();
        ad.conc.psi = vec![0.0, 7.5];
        let a = ad.forward_train(&x, &[1; 6]).unwrap();
        let b = bn.forward_train(&x, &[1; 6]).unwrap();
        assert_eq!(a.out, b.out);
    }

    #[test]
    fn identical_task_slices_ignore_psi() {
        let half = [0.5, -1.0, 2.0];
        let data: Vec<f64> = half.iter().chain(&half).copied().collect();
        let x = Tensor3::from_vec(6, 1, 1, data).unwrap();
        let mut ad = NormLayer::new(1, ada(0.0)).unwrap();
        ad.conc.psi = vec![4.0, -3.0];
        let out = ad.forward_train(&x, &[0, 0, 0, 1, 1, 1]).unwrap();
        let s = bn_stats(&x);
        assert!(close(&out.cache.mixed_stats().mean, &s.mean, 1e-15));
        assert!(close(&out.cache.mixed_stats().var, &s.var, 1e-15));
    }

    #[test]
    fn new_tasks_grow_concentration_at_zero() {
        let mut ad = NormLayer::new(2, ada(0.0)).unwrap();
        let x = Tensor3::zeros(3, 2, 1).unwrap();
        ad.forward_train(&x, &[0, 2, 2]).unwrap();
        assert_eq!(ad.conc.psi, vec![0.0; 3]);
    }

    #[test]
    fn population_gets_full_batch_stats() {
        let mut rng = Rng::new(5);
        let x = Tensor3::randn(&mut rng, 8, 2, 1, 0.0, 1.0).unwrap();
        let mut ad = NormLayer::new(2, LayerConfig { kappa: 1.0, ..ada(0.0) }).unwrap();
        let out = ad.forward_train(&x, &[0, 0, 0, 0, 0, 1, 1, 1]).unwrap();
        assert_eq!(out.batch_stats, bn_stats(&x));
        let want: Vec<f64> = bn_stats(&x).mean.iter().map(|m| out.eta * m).collect();
        assert!(close(&ad.population().stats().mean, &want, 1e-15));
        assert_eq!(ad.population().step(), ad.schedule().step());
    }

    #[test]
    fn l_ada_measures_post_update_distance() {
        let mut rng = Rng::new(6);
        let x = Tensor3::randn(&mut rng, 6, 2, 1, 0.0, 1.0).unwrap();
        let mut ad = NormLayer::new(2, ada(1.0)).unwrap();
        let out = ad.forward_train(&x, &[0, 0, 1, 1, 1, 1]).unwrap();
        let want = out.cache.mixed_stats().distance_sq(ad.population().stats());
        assert_eq!(out.l_ada, want);
        let (_, _, zero) = ad
            .forward_with_target(&x, &[0, 0, 1, 1, 1, 1], Some(out.cache.mixed_stats()))
            .unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn eval_examples() {
        let mut layer = NormLayer::new(1, LayerConfig::default()).unwrap();
        let x = Tensor3::from_vec(2, 1, 1, vec![-1.0, 1.0]).unwrap();
        assert!(matches!(layer.forward_eval(&x), Err(Error::State(_))));
        for _ in 0..200 {
            layer.forward_train(&x, &[0, 0]).unwrap();
        }
        let before = layer.population().stats().clone();
        let e1 = layer.forward_eval(&x).unwrap();
        let e2 = layer.forward_eval(&x).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(layer.population().stats(), &before);
        let train = layer.forward_train(&x, &[0, 0]).unwrap().out;
        assert!(close(e1.data(), train.data(), 1e-3));
    }

    #[test]
    fn affine_gradients() {
        let mut rng = Rng::new(7);
        let x = Tensor3::randn(&mut rng, 5, 3, 2, 0.0, 1.0).unwrap();
        let d = Tensor3::randn(&mut rng, 5, 3, 2, 0.0, 1.0).unwrap();
        let mut layer = NormLayer::new(3, LayerConfig::default()).unwrap();
        let out = layer.forward_train(&x, &[0; 5]).unwrap();
        let g = layer.backward(&out.cache, &d, 0.0).unwrap();
        let y = out.cache.normalized();
        for ch in 0..3 {
            let (mut dg, mut db) = (0.0, 0.0);
            for i in 0..5 {
                for p in 0..2 {
                    dg += d.get(i, ch, p) * y.get(i, ch, p);
                    db += d.get(i, ch, p);
                }
            }
            assert!((g.d_gamma[ch] - dg).abs() < 1e-12);
            assert!((g.d_beta[ch] - db).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_gradient_vanishes_without_regularizer_signal() {
        let mut rng = Rng::new(8);
        let x = Tensor3::randn(&mut rng, 6, 2, 1, 0.0, 1.0).unwrap();
        let mut ad = NormLayer::new(2, ada(0.0)).unwrap();
        let out = ad.forward_train(&x, &[0, 0, 0, 1, 1, 1]).unwrap();
        let zero = Tensor3::zeros(6, 2, 1).unwrap();
        let g = ad.backward(&out.cache, &zero, 0.0).unwrap();
        assert!(g.d_psi.iter().all(|&v| v == 0.0));
        let single = ad.forward_train(&x, &[1; 6]).unwrap();
        let d = Tensor3::randn(&mut rng, 6, 2, 1, 0.0, 1.0).unwrap();
        let g = ad.backward(&single.cache, &d, 1.0).unwrap();
        assert!(g.d_psi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_switch_drops_only_the_regularizer_path() {
        let mut rng = Rng::new(9);
        let x = Tensor3::randn(&mut rng, 6, 2, 1, 0.0, 1.0).unwrap();
        let d = Tensor3::randn(&mut rng, 6, 2, 1, 0.0, 1.0).unwrap();
        let tasks = [0, 0, 1, 1, 1, 1];
        let mut on = NormLayer::new(2, ada(1.0)).unwrap();
        let mut off = NormLayer::new(
            2,
            LayerConfig {
                ada_grad_to_input: false,
                ..ada(1.0)
            },
        )
        .unwrap();
        let a = on.forward_train(&x, &tasks).unwrap();
        let b = off.forward_train(&x, &tasks).unwrap();
        let on_g = on.backward(&a.cache, &d, 1.0).unwrap();
        let off_g = off.backward(&b.cache, &d, 1.0).unwrap();
        let plain = off.backward(&b.cache, &d, 0.0).unwrap();
        assert!(close(off_g.d_input.data(), plain.d_input.data(), 1e-12));
        assert!(close(&on_g.d_psi, &off_g.d_psi, 1e-12));
        assert!(!close(on_g.d_input.data(), off_g.d_input.data(), 1e-9));
    }

    #[test]
    fn similarity_examples() {
        let a = Tensor3::from_vec(1, 2, 1, vec![1.0, 0.0]).unwrap();
        let b = Tensor3::from_vec(1, 2, 1, vec![0.0, 3.0]).unwrap();
        assert!((gradient_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((gradient_similarity(&a.map(|v| -v), &a).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(gradient_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(gradient_similarity(&Tensor3::zeros(1, 2, 1).unwrap(), &a).unwrap(), 0.0);
    }

    #[test]
    fn bn_mode_is_stats_normalize_affine() {
        let mut rng = Rng::new(10);
        let x = Tensor3::randn(&mut rng, 4, 3, 2, 2.0, 1.0).unwrap();
        let mut layer = NormLayer::new(3, LayerConfig::default()).unwrap();
        layer.affine.gamma = vec![0.5, 1.0, 2.0];
        layer.affine.beta = vec![0.1, -0.2, 0.3];
        let want = affine(&normalize(&x, &bn_stats(&x), DEFAULT_EPS).unwrap(), &layer.affine).unwrap();
        assert_eq!(layer.forward_train(&x, &[0; 4]).unwrap().out, want);
    }

    #[test]
    fn cn_checks_groups_and_mode() {
        assert!(NormLayer::new(
            6,
            LayerConfig {
                mode: NormMode::Cn,
                groups: 4,
                ..LayerConfig::default()
            }
        )
        .is_err());
        let mut bn = NormLayer::new(4, LayerConfig::default()).unwrap();
        assert!(cn_forward(&Tensor3::zeros(2, 4, 1).unwrap(), &mut bn).is_err());
        let mut cn = NormLayer::new(
            4,
            LayerConfig {
                mode: NormMode::Cn,
                groups: 2,
                ..LayerConfig::default()
            },
        )
        .unwrap();
        let mut rng = Rng::new(11);
        let out = cn_forward(&Tensor3::randn(&mut rng, 3, 4, 2, 0.0, 1.0).unwrap(), &mut cn).unwrap();
        assert!(out.is_finite());
    }
}
