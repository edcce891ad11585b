//! The tiny classifier: `(Linear -> NormLayer -> activation)` blocks and a
//! linear head, trained with cross-entropy plus `lambda * sum(l_ada)`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_error, Error, Result};
use crate::harness::buffer::TaskBatch;
use crate::layer::{gradient_similarity, LayerCache, LayerConfig, LayerGrads, NormLayer};
use crate::rng::Rng;
use crate::stats::Stats;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Smooth, so finite differences never straddle a kink.
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => arg_error(format!("unknown activation `{other}`")),
        }
    }
}

/// Dense layer, `y = W x + b` with `W` stored row-major as outputs x inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn he(rng: &mut Rng, inputs: usize, outputs: usize) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            w: (0..inputs * outputs).map(|_| rng.gaussian(0.0, std)).collect(),
            b: vec![0.0; outputs],
        }
    }

    /// `x` holds `n` rows of `inputs` values.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.outputs];
        for i in 0..n {
            let xi = &x[i * self.inputs..(i + 1) * self.inputs];
            for o in 0..self.outputs {
                let wo = &self.w[o * self.inputs..(o + 1) * self.inputs];
                y[i * self.outputs + o] = self.b[o] + wo.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        y
    }

    /// Returns `(dW, db, dx)`.
    pub fn backward(&self, x: &[f64], dy: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (ni, no) = (self.inputs, self.outputs);
        let mut dw = vec![0.0; ni * no];
        let mut db = vec![0.0; no];
        let mut dx = vec![0.0; n * ni];
        for i in 0..n {
            let xi = &x[i * ni..(i + 1) * ni];
            for o in 0..no {
                let g = dy[i * no + o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for j in 0..ni {
                    dw[o * ni + j] += g * xi[j];
                    dx[i * ni + j] += g * self.w[o * ni + j];
                }
            }
        }
        (dw, db, dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    pub layer: LayerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: vec![32, 32],
            classes: 10,
            activation: Activation::Relu,
            layer: LayerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    config: ModelConfig,
    pub linears: Vec<Linear>,
    pub norms: Vec<NormLayer>,
    pub head: Linear,
}

/// Per-block values kept from a forward pass.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    /// Input of the block's linear layer.
    input: Vec<f64>,
    cache: LayerCache,
    /// Norm output, before the activation.
    pre_act: Vec<f64>,
    post_act: Vec<f64>,
    pub l_ada: f64,
    pub eta: f64,
    pub batch_stats: Option<Stats>,
    pub pop_stats: Option<Stats>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub blocks: Vec<BlockRecord>,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub linears: Vec<(Vec<f64>, Vec<f64>)>,
    pub norms: Vec<LayerGrads>,
    pub head: (Vec<f64>, Vec<f64>),
}

impl ModelGrads {
    /// Gradient groups named and ordered as in [`TinyModel::param_groups_mut`].
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, ((dw, db), g)) in self.linears.iter().zip(&self.norms).enumerate() {
            out.push((format!("linear{i}.w"), dw.as_slice()));
            out.push((format!("linear{i}.b"), db.as_slice()));
            out.push((format!("norm{i}.gamma"), g.d_gamma.as_slice()));
            out.push((format!("norm{i}.beta"), g.d_beta.as_slice()));
            out.push((format!("norm{i}.psi"), g.d_psi.as_slice()));
        }
        out.push(("head.w".into(), self.head.0.as_slice()));
        out.push(("head.b".into(), self.head.1.as_slice()));
        out
    }
}

/// Diagnostics of one norm layer for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDiag {
    /// Cosine of the gradient w.r.t. the normalized representation and that representation.
    pub grad_similarity: f64,
    /// Norm of the gradient w.r.t. the layer input.
    pub grad_magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub ce: f64,
    pub l_ada: Vec<f64>,
    pub eta: Vec<f64>,
    pub batch_stat_norm: Vec<f64>,
    pub pop_stat_norm: Vec<f64>,
    pub diag: Vec<LayerDiag>,
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for k in 0..classes {
            let p = (row[k] - lse).exp();
            grad[i * classes + k] = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

impl TinyModel {
    pub fn new(rng: &mut Rng, config: ModelConfig) -> Result<Self> {
        if config.dim < 1 || config.classes < 1 || config.hidden.is_empty() || config.hidden.contains(&0) {
            return arg_error("model needs dim, classes and every hidden width >= 1, and one hidden layer");
        }
        let mut linears = Vec::new();
        let mut norms = Vec::new();
        let mut inputs = config.dim;
        for &width in &config.hidden {
            linears.push(Linear::he(rng, inputs, width));
            norms.push(NormLayer::new(width, config.layer.clone())?);
            inputs = width;
        }
        let head = Linear::he(rng, inputs, config.classes);
        Ok(Self {
            config,
            linears,
            norms,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn lambda(&self) -> f64 {
        self.config.layer.lambda
    }

    /// Makes every norm layer aware of the given tasks (grows `psi`).
    pub fn observe_tasks(&mut self, tasks: &[usize]) {
        for norm in &mut self.norms {
            for &t in tasks {
                norm.conc.observe(t);
            }
        }
    }

    fn check_batch(&self, batch: &TaskBatch) -> Result<()> {
        if batch.x.c() * batch.x.d() != self.config.dim {
            return Err(Error::Shape(format!(
                "model expects {} features, batch has {}",
                self.config.dim,
                batch.x.c() * batch.x.d()
            )));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.config.classes) {
            return Err(Error::Shape(format!(
                "label {y} outside the {} classes",
                self.config.classes
            )));
        }
        Ok(())
    }

    fn finish_block(&self, input: Vec<f64>, out: &Tensor3, cache: LayerCache, l_ada: f64) -> BlockRecord {
        let act = self.config.activation;
        let pre_act = out.data().to_vec();
        let post_act = pre_act.iter().map(|&v| act.apply(v)).collect();
        BlockRecord {
            input,
            cache,
            pre_act,
            post_act,
            l_ada,
            eta: 0.0,
            batch_stats: None,
            pop_stats: None,
        }
    }

    /// Stateful training forward: advances every norm layer's population statistics.
    pub fn forward_train(&mut self, batch: &TaskBatch) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let n = batch.len();
        let mut h = batch.x.data().to_vec();
        let mut blocks = Vec::with_capacity(self.linears.len());
        for i in 0..self.linears.len() {
            let z = self.linears[i].forward(&h, n);
            let z = Tensor3::from_vec(n, self.linears[i].outputs, 1, z)?;
            let out = self.norms[i].forward_train(&z, &batch.tasks)?;
            let mut rec = self.finish_block(h, &out.out, out.cache, out.l_ada);
            rec.eta = out.eta;
            rec.batch_stats = Some(out.batch_stats);
            rec.pop_stats = Some(self.norms[i].population().stats().clone());
            h = rec.post_act.clone();
            blocks.push(rec);
        }
        let logits = self.head.forward(&h, n);
        Ok(ForwardPass { logits, blocks, n })
    }

    /// Training-mode forward without state changes; `targets` fixes each
    /// layer's `l_ada` target (none means no `l_ada`).
    pub fn forward_frozen(&self, batch: &TaskBatch, targets: Option<&[Stats]>) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        if let Some(t) = targets {
            if t.len() != self.norms.len() {
                return arg_error("one target per norm layer is required");
            }
        }
        let n = batch.len();
        let mut h = batch.x.data().to_vec();
        let mut blocks = Vec::with_capacity(self.linears.len());
        for i in 0..self.linears.len() {
            let z = self.linears[i].forward(&h, n);
            let z = Tensor3::from_vec(n, self.linears[i].outputs, 1, z)?;
            let target = targets.map(|t| &t[i]);
            let (out, cache, l_ada) = self.norms[i].forward_with_target(&z, &batch.tasks, target)?;
            let rec = self.finish_block(h, &out, cache, l_ada);
            h = rec.post_act.clone();
            blocks.push(rec);
        }
        let logits = self.head.forward(&h, n);
        Ok(ForwardPass { logits, blocks, n })
    }

    /// `(total loss, cross-entropy part)`.
    pub fn loss(&self, pass: &ForwardPass, labels: &[usize]) -> (f64, f64) {
        let (ce, _) = cross_entropy(&pass.logits, labels, self.config.classes);
        let ada: f64 = pass.blocks.iter().map(|b| b.l_ada).sum();
        (ce + self.lambda() * ada, ce)
    }

    pub fn backward(&self, pass: &ForwardPass, labels: &[usize]) -> Result<(ModelGrads, Vec<LayerDiag>)> {
        let n = pass.n;
        let (_, dlogits) = cross_entropy(&pass.logits, labels, self.config.classes);
        let last = &pass.blocks.last().expect("at least one block").post_act;
        let (hw, hb, mut dh) = self.head.backward(last, &dlogits, n);
        let act = self.config.activation;
        let mut linears = vec![(Vec::new(), Vec::new()); self.linears.len()];
        let mut norms = Vec::with_capacity(self.norms.len());
        let mut diag = vec![
            LayerDiag {
                grad_similarity: 0.0,
                grad_magnitude: 0.0
            };
            self.norms.len()
        ];
        for i in (0..self.linears.len()).rev() {
            let rec = &pass.blocks[i];
            let width = self.linears[i].outputs;
            let d_pre: Vec<f64> = dh
                .iter()
                .zip(rec.pre_act.iter().zip(&rec.post_act))
                .map(|(g, (&x, &y))| g * act.grad(x, y))
                .collect();
            let d_out = Tensor3::from_vec(n, width, 1, d_pre)?;
            let grads = self.norms[i].backward(&rec.cache, &d_out, self.lambda())?;
            let gamma = &self.norms[i].affine.gamma;
            let d_norm = Tensor3::from_vec(
                n,
                width,
                1,
                d_out
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, g)| g * gamma[k % width])
                    .collect(),
            )?;
            diag[i] = LayerDiag {
                grad_similarity: gradient_similarity(&d_norm, rec.cache.normalized())?,
                grad_magnitude: grads.d_input.norm(),
            };
            let (dw, db, dx) = self.linears[i].backward(&rec.input, grads.d_input.data(), n);
            linears[i] = (dw, db);
            norms.push(grads);
            dh = dx;
        }
        norms.reverse();
        Ok((
            ModelGrads {
                linears,
                norms,
                head: (hw, hb),
            },
            diag,
        ))
    }

    /// Named parameter groups, in the order of [`ModelGrads::groups`].
    pub fn param_groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, (lin, norm)) in self.linears.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.push((format!("linear{i}.w"), lin.w.as_mut_slice()));
            out.push((format!("linear{i}.b"), lin.b.as_mut_slice()));
            out.push((format!("norm{i}.gamma"), norm.affine.gamma.as_mut_slice()));
            out.push((format!("norm{i}.beta"), norm.affine.beta.as_mut_slice()));
            out.push((format!("norm{i}.psi"), norm.conc.psi.as_mut_slice()));
        }
        out.push(("head.w".into(), self.head.w.as_mut_slice()));
        out.push(("head.b".into(), self.head.b.as_mut_slice()));
        out
    }

    pub fn apply_grads(&mut self, grads: &ModelGrads, lr: f64) {
        for (lin, (dw, db)) in self.linears.iter_mut().zip(&grads.linears) {
            sgd(&mut lin.w, dw, lr);
            sgd(&mut lin.b, db, lr);
        }
        for (norm, g) in self.norms.iter_mut().zip(&grads.norms) {
            norm.apply_grads(g, lr);
        }
        sgd(&mut self.head.w, &grads.head.0, lr);
        sgd(&mut self.head.b, &grads.head.1, lr);
    }

    /// One optimizer step on `batch`: forward (updating population statistics),
    /// backward, SGD.
    pub fn train_step(&mut self, batch: &TaskBatch, lr: f64) -> Result<StepReport> {
        let pass = self.forward_train(batch)?;
        let (loss, ce) = self.loss(&pass, &batch.labels);
        let report = |diag: Vec<LayerDiag>| StepReport {
            loss,
            ce,
            l_ada: pass.blocks.iter().map(|b| b.l_ada).collect(),
            eta: pass.blocks.iter().map(|b| b.eta).collect(),
            batch_stat_norm: pass
                .blocks
                .iter()
                .map(|b| b.batch_stats.as_ref().map_or(0.0, Stats::norm))
                .collect(),
            pop_stat_norm: pass
                .blocks
                .iter()
                .map(|b| b.pop_stats.as_ref().map_or(0.0, Stats::norm))
                .collect(),
            diag,
        };
        if !loss.is_finite() {
            return Ok(report(Vec::new()));
        }
        let (grads, diag) = self.backward(&pass, &batch.labels)?;
        self.apply_grads(&grads, lr);
        Ok(report(diag))
    }

    /// Evaluation logits using population statistics.
    pub fn predict(&self, x: &Tensor3) -> Result<Vec<f64>> {
        let n = x.n();
        if x.c() * x.d() != self.config.dim {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.config.dim,
                x.c() * x.d()
            )));
        }
        let act = self.config.activation;
        let mut h = x.data().to_vec();
        for (lin, norm) in self.linears.iter().zip(&self.norms) {
            let z = Tensor3::from_vec(n, lin.outputs, 1, lin.forward(&h, n))?;
            h = norm
                .forward_eval(&z)?
                .into_vec()
                .into_iter()
                .map(|v| act.apply(v))
                .collect();
        }
        Ok(self.head.forward(&h, n))
    }

    pub fn is_finite(&self) -> bool {
        let lin_ok = |l: &Linear| l.w.iter().chain(&l.b).all(|v| v.is_finite());
        self.linears.iter().all(lin_ok)
            && lin_ok(&self.head)
            && self.norms.iter().all(|n| {
                n.affine
                    .gamma
                    .iter()
                    .chain(&n.affine.beta)
                    .chain(&n.conc.psi)
                    .all(|v| v.is_finite())
            })
    }
}

fn sgd(p: &mut [f64], g: &[f64], lr: f64) {
    for (p, g) in p.iter_mut().zip(g) {
        *p -= lr * g;
    }
}
