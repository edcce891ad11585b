//! Momentum schedules and population statistics.
//!
//! Three schedules are supported: constant-momentum EMA, cumulative moving
//! average (`eta_i = 1 / (1 + i)`), and the adaptive recurrence
//! `eta_i = eta_{i-1} / (eta_{i-1} + (1 - eta_tilde)^kappa)` with
//! `eta_0 = eta_tilde^kappa`, which is EMA at `kappa = 1` and CMA at `kappa = 0`.
//! Batch indices start at 1, so the first emitted value is `eta_1`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_error, Error, Result};
use crate::stats::Stats;

pub const DEFAULT_ETA_TILDE: f64 = 0.1;
pub const DEFAULT_KAPPA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ema,
    Cma,
    Adab2n,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Ema => "ema",
            ScheduleKind::Cma => "cma",
            ScheduleKind::Adab2n => "adab2n",
        })
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ema" => Ok(ScheduleKind::Ema),
            "cma" => Ok(ScheduleKind::Cma),
            "adab2n" => Ok(ScheduleKind::Adab2n),
            other => arg_error(format!("unknown schedule kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    kind: ScheduleKind,
    eta_tilde: f64,
    kappa: f64,
    step: u64,
    eta_prev: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return arg_error(format!("momentum must lie in (0, 1), got {eta}"));
    }
    Ok(())
}

impl MomentumSchedule {
    pub fn ema(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self {
            kind: ScheduleKind::Ema,
            eta_tilde: eta,
            kappa: 1.0,
            step: 0,
            eta_prev: eta,
        })
    }

    pub fn cma() -> Self {
        Self {
            kind: ScheduleKind::Cma,
            eta_tilde: DEFAULT_ETA_TILDE,
            kappa: 0.0,
            step: 0,
            eta_prev: 1.0,
        }
    }

    pub fn adab2n(eta_tilde: f64, kappa: f64) -> Result<Self> {
        check_eta(eta_tilde)?;
        if !(0.0..=1.0).contains(&kappa) {
            return arg_error(format!("kappa must lie in [0, 1], got {kappa}"));
        }
        Ok(Self {
            kind: ScheduleKind::Adab2n,
            eta_tilde,
            kappa,
            step: 0,
            eta_prev: eta_tilde.powf(kappa),
        })
    }

    /// Builds a schedule of the given kind; `eta_tilde` is the EMA momentum
    /// for [`ScheduleKind::Ema`] and is ignored for CMA.
    pub fn from_kind(kind: ScheduleKind, eta_tilde: f64, kappa: f64) -> Result<Self> {
        match kind {
            ScheduleKind::Ema => Self::ema(eta_tilde),
            ScheduleKind::Cma => Ok(Self::cma()),
            ScheduleKind::Adab2n => Self::adab2n(eta_tilde, kappa),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }
    pub fn eta_tilde(&self) -> f64 {
        self.eta_tilde
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    /// Number of values emitted so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Emits `eta_i` for the next batch and advances the counter.
    pub fn next_eta(&mut self) -> f64 {
        self.step += 1;
        let eta = match self.kind {
            ScheduleKind::Ema => self.eta_tilde,
            ScheduleKind::Cma => 1.0 / (1.0 + self.step as f64),
            ScheduleKind::Adab2n => {
                let q = (1.0 - self.eta_tilde).powf(self.kappa);
                self.eta_prev / (self.eta_prev + q)
            }
        };
        self.eta_prev = eta;
        eta
    }

    /// The value the adaptive recurrence converges to, `1 - (1 - eta_tilde)^kappa`.
    pub fn limit(&self) -> f64 {
        match self.kind {
            ScheduleKind::Ema => self.eta_tilde,
            ScheduleKind::Cma => 0.0,
            ScheduleKind::Adab2n => 1.0 - (1.0 - self.eta_tilde).powf(self.kappa),
        }
    }
}

impl Iterator for MomentumSchedule {
    type Item = f64;
    fn next(&mut self) -> Option<f64> {
        Some(self.next_eta())
    }
}

/// Running population statistics, zero until the first update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    stats: Stats,
    initialized: bool,
    step: u64,
}

impl PopulationStats {
    pub fn new(channels: usize) -> Self {
        Self {
            stats: Stats::zeros(channels),
            initialized: false,
            step: 0,
        }
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }
    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
    pub fn step(&self) -> u64 {
        self.step
    }

    /// `stats <- (1 - eta) * stats + eta * batch`.
    pub fn update(&mut self, batch: &Stats, eta: f64) -> Result<()> {
        if !(eta > 0.0 && eta <= 1.0) {
            return arg_error(format!("update momentum must lie in (0, 1], got {eta}"));
        }
        if batch.channels() != self.stats.channels() {
            return Err(Error::Shape(format!(
                "batch stats have {} channels, population has {}",
                batch.channels(),
                self.stats.channels()
            )));
        }
        for (p, b) in self.stats.mean.iter_mut().zip(&batch.mean) {
            *p = (1.0 - eta) * *p + eta * b;
        }
        for (p, b) in self.stats.var.iter_mut().zip(&batch.var) {
            *p = (1.0 - eta) * *p + eta * b;
        }
        self.initialized = true;
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ulp(x: f64) -> f64 {
        f64::from_bits(x.to_bits() + 1) - x
    }

    #[test]
    fn kappa_one_is_constant() {
        let s = MomentumSchedule::adab2n(0.1, 1.0).unwrap();
        for eta in s.take(1000) {
            assert_eq!(eta, 0.1);
        }
    }

    #[test]
    fn kappa_zero_is_cma() {
        let mut s = MomentumSchedule::adab2n(0.1, 0.0).unwrap();
        assert_eq!(s.next_eta(), 0.5);
        assert_eq!(s.next_eta(), 1.0 / 3.0);
        let mut cma = MomentumSchedule::cma();
        assert_eq!(cma.next_eta(), 0.5);
        assert_eq!(cma.next_eta(), 1.0 / 3.0);
    }

    #[test]
    fn kappa_half_values() {
        let mut s = MomentumSchedule::adab2n(0.1, 0.5).unwrap();
        assert!((s.eta_prev - 0.316228).abs() < 1e-6);
        let e1 = s.next_eta();
        let e2 = s.next_eta();
        assert!((e1 - 0.25).abs() < 1e-6, "{e1}");
        assert!((e2 - 0.208562).abs() < 1e-6, "{e2}");
    }

    #[test]
    fn argument_errors() {
        assert!(MomentumSchedule::adab2n(0.0, 0.5).is_err());
        assert!(MomentumSchedule::adab2n(1.0, 0.5).is_err());
        assert!(MomentumSchedule::adab2n(0.1, 1.5).is_err());
        assert!(MomentumSchedule::adab2n(0.1, -0.1).is_err());
        assert!(MomentumSchedule::ema(1.0).is_err());
    }

    #[test]
    fn population_full_replacement_and_unroll() {
        let batch = Stats {
            mean: vec![3.0, -1.0],
            var: vec![2.0, 0.5],
        };
        let mut p = PopulationStats::new(2);
        assert!(!p.is_initialized());
        p.update(&batch, 1.0).unwrap();
        assert_eq!(p.stats(), &batch);

        let ones = Stats {
            mean: vec![1.0],
            var: vec![1.0],
        };
        let mut p = PopulationStats::new(1);
        for _ in 0..10 {
            p.update(&ones, 0.1).unwrap();
        }
        assert!((p.stats().mean[0] - (1.0 - 0.9f64.powi(10))).abs() < 1e-12);
        assert!((p.stats().mean[0] - 0.651322).abs() < 1e-6);
        for _ in 0..2000 {
            p.update(&ones, 0.1).unwrap();
        }
        assert!((p.stats().mean[0] - 1.0).abs() < 1e-12);
        assert!(p.update(&ones, 0.0).is_err());
    }

    #[test]
    fn cma_is_arithmetic_mean_with_zero_start() {
        // CMA starts at eta_1 = 1/2, so the zero initial state counts as one
        // sample of the average.
        let mut rng = crate::rng::Rng::new(11);
        let mut p = PopulationStats::new(3);
        let mut s = MomentumSchedule::cma();
        let mut sum = Stats::zeros(3);
        let m = 500;
        for _ in 0..m {
            let b = Stats {
                mean: (0..3).map(|_| rng.gaussian(0.0, 2.0)).collect(),
                var: (0..3).map(|_| rng.uniform_range(0.0, 3.0)).collect(),
            };
            for c in 0..3 {
                sum.mean[c] += b.mean[c];
                sum.var[c] += b.var[c];
            }
            p.update(&b, s.next_eta()).unwrap();
        }
        for c in 0..3 {
            assert!((p.stats().mean[c] - sum.mean[c] / (m as f64 + 1.0)).abs() < 1e-12);
            assert!((p.stats().var[c] - sum.var[c] / (m as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn kappa_zero_within_one_ulp_per_step() {
        let mut s = MomentumSchedule::adab2n(0.1, 0.0).unwrap();
        for i in 1..=10_000u64 {
            let eta = s.next_eta();
            let exact = 1.0 / (1.0 + i as f64);
            assert!((eta - exact).abs() <= i as f64 * ulp(exact), "step {i}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn interior_kappa_decreasing_to_limit(eta in 0.001f64..0.999, kappa in 0.001f64..0.999) {
            let mut s = MomentumSchedule::adab2n(eta, kappa).unwrap();
            let limit = s.limit();
            let mut prev = s.eta_prev;
            for _ in 0..200 {
                let e = s.next_eta();
                prop_assert!(e > 0.0 && e <= 1.0);
                // monotone up to rounding once the fixed point is reached
                prop_assert!(e <= prev * (1.0 + 4.0 * f64::EPSILON));
                prop_assert!(e >= limit * (1.0 - 1e-12));
                prev = e;
            }
        }

        #[test]
        fn population_var_stays_nonnegative(seed in any::<u64>(), eta in 0.01f64..1.0) {
            let mut rng = crate::rng::Rng::new(seed);
            let mut p = PopulationStats::new(2);
            for _ in 0..50 {
                let b = Stats { mean: vec![rng.normal(), rng.normal()], var: vec![rng.uniform(), rng.uniform()] };
                p.update(&b, eta).unwrap();
                prop_assert!(p.stats().var.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
