//! Experiment configuration, read from JSON. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::harness::model::Activation;
use crate::harness::stream::StreamConfig;
use crate::harness::train::TrainConfig;
use crate::layer::{LayerConfig, NormMode};
use crate::momentum::{MomentumSchedule, ScheduleKind, DEFAULT_ETA_TILDE, DEFAULT_KAPPA};

/// Batch schedule for the weight analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub eta_tilde: f64,
    pub kappa: f64,
    pub tasks: usize,
    /// Batches per task when `boundaries` is absent.
    pub m1: usize,
    /// Explicit last-batch index of every task; overrides `tasks` and `m1`.
    pub boundaries: Option<Vec<usize>>,
    /// Current-task proportion from the second task on.
    pub r: f64,
    /// One schedule per value, replacing `kappa`; implies the adaptive kind.
    pub kappa_sweep: Vec<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Ema,
            eta_tilde: DEFAULT_ETA_TILDE,
            kappa: DEFAULT_KAPPA,
            tasks: 2,
            m1: 5,
            boundaries: None,
            r: 1.0,
            kappa_sweep: Vec::new(),
        }
    }
}

impl ScheduleConfig {
    pub fn boundaries(&self) -> Vec<usize> {
        self.boundaries
            .clone()
            .unwrap_or_else(|| (1..=self.tasks).map(|t| t * self.m1).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries.is_none() && (self.tasks < 1 || self.m1 < 1) {
            return Err(Error::Config("schedule.tasks and schedule.m1 must be >= 1".into()));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Config(format!("schedule.r must lie in (0, 1], got {}", self.r)));
        }
        for &k in self.kappa_sweep.iter().chain(std::iter::once(&self.kappa)) {
            MomentumSchedule::from_kind(ScheduleKind::Adab2n, self.eta_tilde, k).map_err(config_err)?;
        }
        MomentumSchedule::from_kind(self.kind, self.eta_tilde, self.kappa).map_err(config_err)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub schedule: ScheduleConfig,
    pub layer: LayerConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub stream: StreamConfig,
    pub gradcheck: GradcheckConfig,
    /// Modes to train side by side; empty means `layer.mode` alone.
    pub modes: Vec<NormMode>,
    /// Current-task proportions to sweep; each sets `n_replay` from
    /// `batch_size`. Empty means `training.n_replay` alone.
    pub r_sweep: Vec<f64>,
    /// Output directory, relative paths resolved against the working directory.
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            schedule: ScheduleConfig::default(),
            layer: LayerConfig {
                groups: 8,
                ..LayerConfig::default()
            },
            model: ModelSection::default(),
            training: TrainConfig::default(),
            stream: StreamConfig::default(),
            gradcheck: GradcheckConfig::default(),
            modes: Vec::new(),
            r_sweep: Vec::new(),
            output: None,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// `n_replay` giving current-task proportion `r` for `batch_size` current samples.
pub fn replay_for_ratio(batch_size: usize, r: f64) -> usize {
    ((batch_size as f64) * (1.0 / r - 1.0)).round() as usize
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn modes(&self) -> Vec<NormMode> {
        if self.modes.is_empty() {
            vec![self.layer.mode]
        } else {
            self.modes.clone()
        }
    }

    /// `(r, n_replay)` pairs to run.
    pub fn replay_arms(&self) -> Vec<(f64, usize)> {
        if self.r_sweep.is_empty() {
            vec![(self.training.r(), self.training.n_replay)]
        } else {
            self.r_sweep
                .iter()
                .map(|&r| (r, replay_for_ratio(self.training.batch_size, r)))
                .collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.schedule.validate()?;
        self.layer.validate().map_err(config_err)?;
        self.training.validate().map_err(config_err)?;
        self.stream.validate().map_err(config_err)?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden needs at least one positive width".into()));
        }
        if let Some(&r) = self.r_sweep.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!("r_sweep values must lie in (0, 1], got {r}")));
        }
        if self.modes().contains(&NormMode::Cn) {
            if let Some(&w) = self.model.hidden.iter().find(|&&w| w % self.layer.groups != 0) {
                return Err(Error::Config(format!(
                    "CN needs hidden widths divisible by layer.groups = {}, got {w}",
                    self.layer.groups
                )));
            }
        }
        if self.gradcheck.instances < 1 || !(self.gradcheck.step > 0.0) || !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config(
                "gradcheck needs instances >= 1 and positive step and tolerance".into(),
            ));
        }
        Ok(())
    }
}
