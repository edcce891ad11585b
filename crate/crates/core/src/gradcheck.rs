//! Finite-difference verification of the hand-written backward passes.
//!
//! Layer instances use the scalar loss `<R, out> + lambda * l_ada` for a
//! random projection `R` and a fixed `l_ada` target. The whole-model check
//! uses the training loss with every layer's target frozen at the population
//! statistics a real training step would produce.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::buffer::TaskBatch;
use crate::harness::model::{Activation, ModelConfig, TinyModel};
use crate::harness::stream::Sample;
use crate::layer::{LayerConfig, NormLayer, NormMode};
use crate::rng::Rng;
use crate::stats::Stats;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

/// Below this norm a gradient group counts as zero, so its error is absolute:
/// central differences at h = 1e-5 carry about 1e-11 of rounding noise.
pub const ZERO_FLOOR: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||, ZERO_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(ZERO_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub layer: Vec<GroupError>,
    pub model: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layer
            .iter()
            .chain(&self.model)
            .all(|g| g.max_rel_error <= self.tolerance)
    }
}

/// A randomized small layer with its inputs.
#[derive(Debug, Clone)]
pub struct LayerInstance {
    pub layer: NormLayer,
    pub input: Tensor3,
    pub tasks: Vec<usize>,
    pub projection: Tensor3,
    pub target: Stats,
    pub lambda: f64,
}

impl LayerInstance {
    pub fn random(rng: &mut Rng, mode: NormMode, lambda: f64) -> Result<Self> {
        let groups = 1 + rng.below(3);
        let channels = groups * (1 + rng.below(3));
        let d = 1 + rng.below(3);
        let n = 4 + rng.below(9);
        let n_tasks = 1 + rng.below(3);
        let config = LayerConfig {
            mode,
            groups,
            lambda,
            ..LayerConfig::default()
        };
        let mut layer = NormLayer::new(channels, config)?;
        // every task gets at least one sample
        let mut tasks: Vec<usize> = (0..n)
            .map(|i| if i < n_tasks { i } else { rng.below(n_tasks) })
            .collect();
        rng.shuffle(&mut tasks);
        for &t in &tasks {
            layer.conc.observe(t);
        }
        for p in &mut layer.conc.psi {
            *p = rng.uniform_range(-2.0, 2.0);
        }
        for g in &mut layer.affine.gamma {
            *g = rng.uniform_range(0.5, 1.5);
        }
        for b in &mut layer.affine.beta {
            *b = rng.gaussian(0.0, 0.5);
        }
        let offset = rng.gaussian(0.0, 1.0);
        let spread = 1.0 + rng.uniform();
        let input = Tensor3::randn(rng, n, channels, d, offset, spread)?;
        let projection = Tensor3::randn(rng, n, channels, d, 0.0, 1.0)?;
        let mut target = Stats::zeros(channels);
        for c in 0..channels {
            target.mean[c] = rng.gaussian(0.0, 1.0);
            target.var[c] = rng.uniform_range(0.2, 2.0);
        }
        Ok(Self {
            layer,
            input,
            tasks,
            projection,
            target,
            lambda,
        })
    }

    pub fn loss(&self, layer: &NormLayer, input: &Tensor3) -> Result<f64> {
        let (out, _, l_ada) = layer.forward_with_target(input, &self.tasks, Some(&self.target))?;
        Ok(out.dot(&self.projection)? + self.lambda * l_ada)
    }

    /// Relative errors for `[input, gamma, beta, psi]`.
    pub fn check(&self, h: f64) -> Result<[f64; 4]> {
        let (_, cache, _) = self
            .layer
            .forward_with_target(&self.input, &self.tasks, Some(&self.target))?;
        let g = self.layer.backward(&cache, &self.projection, self.lambda)?;
        let (n, c, d) = self.input.shape();
        let mut err = [0.0; 4];

        let mut x = self.input.data().to_vec();
        let num = numeric_grad(&mut x, h, |x| {
            let t = Tensor3::from_vec(n, c, d, x.to_vec()).unwrap();
            self.loss(&self.layer, &t).unwrap()
        });
        err[0] = rel_error(g.d_input.data(), &num);

        let mut layer = self.layer.clone();
        let mut p = layer.affine.gamma.clone();
        let num = numeric_grad(&mut p, h, |p| {
            layer.affine.gamma.copy_from_slice(p);
            self.loss(&layer, &self.input).unwrap()
        });
        err[1] = rel_error(&g.d_gamma, &num);

        let mut layer = self.layer.clone();
        let mut p = layer.affine.beta.clone();
        let num = numeric_grad(&mut p, h, |p| {
            layer.affine.beta.copy_from_slice(p);
            self.loss(&layer, &self.input).unwrap()
        });
        err[2] = rel_error(&g.d_beta, &num);

        let mut layer = self.layer.clone();
        let mut p = layer.conc.psi.clone();
        let num = numeric_grad(&mut p, h, |p| {
            layer.conc.psi.copy_from_slice(p);
            self.loss(&layer, &self.input).unwrap()
        });
        err[3] = rel_error(&g.d_psi, &num);
        Ok(err)
    }
}

/// A small model plus a multi-task batch and frozen targets.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub model: TinyModel,
    pub batch: TaskBatch,
    pub targets: Vec<Stats>,
}

impl ModelInstance {
    pub fn random(rng: &mut Rng, mode: NormMode, lambda: f64) -> Result<Self> {
        let dim = 16;
        let classes = 6;
        let config = ModelConfig {
            dim,
            hidden: vec![32, 32],
            classes,
            activation: Activation::Tanh,
            layer: LayerConfig {
                mode,
                lambda,
                groups: 8,
                ..LayerConfig::default()
            },
        };
        let mut model = TinyModel::new(rng, config)?;
        let n = 12;
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                x: (0..dim).map(|_| rng.normal()).collect(),
                label: rng.below(classes),
                task: i % 3,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = TaskBatch::from_samples(&refs, n)?;
        model.observe_tasks(&batch.tasks);
        for norm in &mut model.norms {
            for p in &mut norm.conc.psi {
                *p = rng.uniform_range(-2.0, 2.0);
            }
        }
        // The targets a real step would use: population after this batch's update.
        let mut probe = model.clone();
        probe.forward_train(&batch)?;
        let targets = probe.norms.iter().map(|n| n.population().stats().clone()).collect();
        Ok(Self { model, batch, targets })
    }

    fn loss(&self, model: &TinyModel) -> f64 {
        let pass = model.forward_frozen(&self.batch, Some(&self.targets)).unwrap();
        model.loss(&pass, &self.batch.labels).0
    }

    /// Relative error per named parameter group.
    pub fn check(&self, h: f64) -> Result<Vec<GroupError>> {
        let pass = self.model.forward_frozen(&self.batch, Some(&self.targets))?;
        let (grads, _) = self.model.backward(&pass, &self.batch.labels)?;
        let analytic: Vec<(String, Vec<f64>)> = grads.groups().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
        let mut out = Vec::new();
        for (k, (name, ga)) in analytic.iter().enumerate() {
            let mut model = self.model.clone();
            let mut p = model.param_groups_mut()[k].1.to_vec();
            let num = numeric_grad(&mut p, h, |p| {
                model.param_groups_mut()[k].1.copy_from_slice(p);
                self.loss(&model)
            });
            out.push(GroupError {
                group: name.clone(),
                max_rel_error: rel_error(ga, &num),
            });
        }
        Ok(out)
    }
}

fn merge_max(acc: &mut Vec<GroupError>, name: &str, e: f64) {
    match acc.iter_mut().find(|g| g.group == name) {
        Some(g) => g.max_rel_error = g.max_rel_error.max(e),
        None => acc.push(GroupError {
            group: name.to_string(),
            max_rel_error: e,
        }),
    }
}

const MODES: [NormMode; 3] = [NormMode::Bn, NormMode::Cn, NormMode::Adab2n];

/// Runs `instances` randomized layer checks (cycling modes, with and without
/// `lambda`) and one model check per mode.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let root = Rng::new(cfg.seed);
    let mut layer = Vec::new();
    for i in 0..cfg.instances {
        let mut rng = root.split(i as u64);
        let mode = MODES[i % 3];
        let lambda = if (i / 3) % 2 == 0 {
            0.0
        } else {
            rng.uniform_range(0.1, 2.0)
        };
        let inst = LayerInstance::random(&mut rng, mode, lambda)?;
        let err = inst.check(cfg.step)?;
        for (name, e) in ["input", "gamma", "beta", "psi"].iter().zip(err) {
            merge_max(&mut layer, name, e);
        }
    }
    let mut model = Vec::new();
    for (k, mode) in MODES.iter().enumerate() {
        let mut rng = root.split(1_000_000 + k as u64);
        let lambda = if *mode == NormMode::Adab2n { 0.5 } else { 0.0 };
        let inst = ModelInstance::random(&mut rng, *mode, lambda)?;
        for g in inst.check(cfg.step)? {
            merge_max(&mut model, &g.group, g.max_rel_error);
        }
    }
    Ok(GradcheckReport {
        layer,
        model,
        tolerance: cfg.tolerance,
    })
}
