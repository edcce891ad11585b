//! Batch statistics for BN and GN (with LN and IN as special cases), plus
//! normalization and the per-channel affine transform.
//!
//! All variances are biased: they divide by the number of entries averaged.

use serde::{Deserialize, Serialize};

use crate::error::{arg_error, Error, Result};
use crate::tensor::Tensor3;

/// Default `eps` added to the variance before taking the square root.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Stats {
    pub fn zeros(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Euclidean norm of the concatenated `(mean, var)` vector.
    pub fn norm(&self) -> f64 {
        self.mean.iter().chain(&self.var).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Squared Euclidean distance between concatenated `(mean, var)` vectors.
    pub fn distance_sq(&self, other: &Stats) -> f64 {
        let dm: f64 = self.mean.iter().zip(&other.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        let dv: f64 = self.var.iter().zip(&other.var).map(|(a, b)| (a - b) * (a - b)).sum();
        dm + dv
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.var).all(|x| x.is_finite())
    }
}

/// Per-sample, per-group statistics, stored `N x G` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub groups: usize,
}

impl GroupStats {
    pub fn get(&self, n: usize, g: usize) -> (f64, f64) {
        let k = n * self.groups + g;
        (self.mean[k], self.var[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel statistics over the listed samples and all spatial positions.
pub fn slice_stats(a: &Tensor3, samples: &[usize]) -> Result<Stats> {
    if samples.is_empty() {
        return Err(Error::Shape("statistics over an empty sample set".into()));
    }
    let (n, c, d) = a.shape();
    if let Some(&bad) = samples.iter().find(|&&i| i >= n) {
        return Err(Error::Shape(format!("sample {bad} out of range {n}")));
    }
    let count = (samples.len() * d) as f64;
    let mut stats = Stats::zeros(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for &i in samples {
            sum += a.row(i, ch).iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for &i in samples {
            sq += a.row(i, ch).iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
        }
        stats.mean[ch] = mean;
        stats.var[ch] = sq / count;
    }
    Ok(stats)
}

/// BN statistics: per channel, over the batch and spatial axes.
pub fn bn_stats(a: &Tensor3) -> Stats {
    let all: Vec<usize> = (0..a.n()).collect();
    slice_stats(a, &all).expect("a Tensor3 always has at least one sample")
}

/// GN statistics over `groups` contiguous channel groups of `C / groups` channels.
///
/// `groups = 1` is layer normalization and `groups = C` instance normalization.
/// Channel counts not divisible by `groups` are rejected.
pub fn gn_stats(a: &Tensor3, groups: usize) -> Result<GroupStats> {
    let (n, c, d) = a.shape();
    check_groups(c, groups)?;
    let k = c / groups;
    let count = (k * d) as f64;
    let mut mean = vec![0.0; n * groups];
    let mut var = vec![0.0; n * groups];
    for s in 0..n {
        for g in 0..groups {
            let channels = g * k..(g + 1) * k;
            let sum: f64 = channels.clone().map(|ch| a.row(s, ch).iter().sum::<f64>()).sum();
            let m = sum / count;
            let sq: f64 = channels
                .map(|ch| a.row(s, ch).iter().map(|x| (x - m) * (x - m)).sum::<f64>())
                .sum();
            mean[s * groups + g] = m;
            var[s * groups + g] = sq / count;
        }
    }
    Ok(GroupStats { mean, var, groups })
}

pub(crate) fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups < 1 || groups > channels {
        return arg_error(format!("groups must be in 1..={channels}, got {groups}"));
    }
    if !channels.is_multiple_of(groups) {
        return arg_error(format!("channel count {channels} is not divisible by {groups} groups"));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return arg_error(format!("eps must be a positive finite number, got {eps}"));
    }
    Ok(())
}

/// `(a - mean) / sqrt(var + eps)` per channel.
pub fn normalize(a: &Tensor3, s: &Stats, eps: f64) -> Result<Tensor3> {
    check_eps(eps)?;
    let (_, c, d) = a.shape();
    if s.channels() != c || s.var.len() != c {
        return Err(Error::Shape(format!(
            "stats have {} channels, tensor has {c}",
            s.channels()
        )));
    }
    let inv: Vec<f64> = s.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = a.clone();
    let data = out.data_mut();
    for sample in data.chunks_mut(c * d) {
        for ((row, m), k) in sample.chunks_mut(d).zip(&s.mean).zip(&inv) {
            for x in row {
                *x = (*x - m) * k;
            }
        }
    }
    Ok(out)
}

/// Group normalization without an affine transform.
pub fn gn_normalize(a: &Tensor3, s: &GroupStats, eps: f64) -> Result<Tensor3> {
    check_eps(eps)?;
    let (n, c, d) = a.shape();
    check_groups(c, s.groups)?;
    if s.mean.len() != n * s.groups {
        return Err(Error::Shape("group stats do not match tensor batch size".into()));
    }
    let k = c / s.groups;
    let mut out = a.clone();
    let data = out.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let (m, v) = s.get(i, ch / k);
            let inv = 1.0 / (v + eps).sqrt();
            let base = (i * c + ch) * d;
            for x in &mut data[base..base + d] {
                *x = (*x - m) * inv;
            }
        }
    }
    Ok(out)
}

/// `gamma * a' + beta` per channel.
pub fn affine(a_prime: &Tensor3, p: &AffineParams) -> Result<Tensor3> {
    let (n, c, d) = a_prime.shape();
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(Error::Shape(format!(
            "affine params have {}/{} channels, tensor has {c}",
            p.gamma.len(),
            p.beta.len()
        )));
    }
    let mut out = a_prime.clone();
    let data = out.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * d;
            for x in &mut data[base..base + d] {
                *x = p.gamma[ch] * *x + p.beta[ch];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t(n: usize, c: usize, d: usize, v: &[f64]) -> Tensor3 {
        Tensor3::from_vec(n, c, d, v.to_vec()).unwrap()
    }

    #[test]
    fn bn_stats_hand_computed() {
        let a = t(2, 1, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = bn_stats(&a);
        assert_eq!(s.mean, vec![2.5]);
        assert_eq!(s.var, vec![1.25]);
    }

    #[test]
    fn bn_stats_constant_and_shift() {
        let a = Tensor3::new(3, 2, 2, 5.0).unwrap();
        let s = bn_stats(&a);
        assert_eq!(s.mean, vec![5.0, 5.0]);
        assert_eq!(s.var, vec![0.0, 0.0]);

        let a = Tensor3::randn(&mut Rng::new(2), 5, 3, 2, 0.0, 1.0).unwrap();
        let b = a.map(|x| x + 10.0);
        let (sa, sb) = (bn_stats(&a), bn_stats(&b));
        for ch in 0..3 {
            assert!((sb.mean[ch] - sa.mean[ch] - 10.0).abs() < 1e-12);
            assert!((sb.var[ch] - sa.var[ch]).abs() < 1e-10);
        }
    }

    #[test]
    fn gn_special_cases() {
        let a = t(1, 2, 1, &[1.0, 3.0]);
        let s = gn_stats(&a, 1).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.var, vec![1.0]);

        // groups = C on one channel: per-sample stats over D only.
        let a = t(2, 1, 3, &[1.0, 2.0, 3.0, 10.0, 10.0, 10.0]);
        let s = gn_stats(&a, 1).unwrap();
        assert_eq!(s.mean, vec![2.0, 10.0]);
        assert!((s.var[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.var[1], 0.0);
    }

    #[test]
    fn gn_rejects_bad_groups() {
        let a = Tensor3::new(1, 6, 1, 0.0).unwrap();
        assert!(matches!(gn_stats(&a, 0), Err(Error::Argument(_))));
        assert!(matches!(gn_stats(&a, 7), Err(Error::Argument(_))));
        assert!(matches!(gn_stats(&a, 4), Err(Error::Argument(_))));
        assert!(gn_stats(&a, 3).is_ok());
    }

    /// Naive reference for GN statistics.
    fn gn_naive(a: &Tensor3, groups: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, c, d) = a.shape();
        let k = c / groups;
        let mut means = vec![];
        let mut vars = vec![];
        for s in 0..n {
            for g in 0..groups {
                let mut vals = vec![];
                for ch in g * k..(g + 1) * k {
                    for p in 0..d {
                        vals.push(a.get(s, ch, p));
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                means.push(m);
                vars.push(v);
            }
        }
        (means, vars)
    }

    #[test]
    fn normalize_constant_is_zero() {
        let a = Tensor3::new(2, 2, 2, 3.0).unwrap();
        let out = normalize(&a, &bn_stats(&a), DEFAULT_EPS).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_hand_computed() {
        let a = t(2, 1, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = normalize(&a, &bn_stats(&a), 1e-5).unwrap();
        for (x, y) in [1.0, 2.0, 3.0, 4.0].iter().zip(out.data()) {
            assert!(((x - 2.5) / 1.25001f64.sqrt() - y).abs() < 1e-15);
        }
        assert!(matches!(normalize(&a, &bn_stats(&a), 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn affine_cases() {
        let a = t(1, 1, 1, &[3.0]);
        assert_eq!(affine(&a, &AffineParams::identity(1)).unwrap(), a);
        let p = AffineParams {
            gamma: vec![0.0],
            beta: vec![4.0],
        };
        assert_eq!(affine(&a, &p).unwrap().data(), &[4.0]);
        let p = AffineParams {
            gamma: vec![2.0],
            beta: vec![1.0],
        };
        assert_eq!(affine(&a, &p).unwrap().data(), &[7.0]);
        assert!(matches!(affine(&a, &AffineParams::identity(2)), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn bn_var_nonnegative(n in 1usize..5, c in 1usize..4, d in 1usize..4, seed in any::<u64>(), scale in 0.0f64..100.0) {
            let a = Tensor3::randn(&mut Rng::new(seed), n, c, d, 3.0, scale).unwrap();
            let s = bn_stats(&a);
            prop_assert!(s.var.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(s.channels(), c);
        }
    }

    proptest! {
        #[test]
        fn scale_equivariance(seed in any::<u64>(), k in -5.0f64..5.0) {
            let a = Tensor3::randn(&mut Rng::new(seed), 4, 3, 2, 1.0, 2.0).unwrap();
            let s = bn_stats(&a);
            let sk = bn_stats(&a.map(|x| k * x));
            for ch in 0..3 {
                prop_assert!((sk.mean[ch] - k * s.mean[ch]).abs() <= 1e-12 * (1.0 + s.mean[ch].abs() * k.abs()));
                prop_assert!((sk.var[ch] - k * k * s.var[ch]).abs() <= 1e-11 * (1.0 + k * k * s.var[ch]));
            }
            if k > 0.1 {
                let eps = DEFAULT_EPS;
                let y = normalize(&a, &s, eps).unwrap();
                let yk = normalize(&a.map(|x| k * x), &sk, eps).unwrap();
                for ch in 0..3 {
                    let v = s.var[ch];
                    let bound = (1.0 - ((v + eps) / (v + eps / (k * k))).sqrt()).abs();
                    for i in 0..4 {
                        for p in 0..2 {
                            let (u, w) = (y.get(i, ch, p), yk.get(i, ch, p));
                            prop_assert!((u - w).abs() <= bound * u.abs() + 1e-9);
                        }
                    }
                }
            }
        }

        #[test]
        fn gn_matches_naive(seed in any::<u64>(), n in 1usize..4, g in 1usize..4, k in 1usize..4, d in 1usize..4) {
            let c = g * k;
            let a = Tensor3::randn(&mut Rng::new(seed), n, c, d, -1.0, 3.0).unwrap();
            for groups in [1, g, c] {
                let s = gn_stats(&a, groups).unwrap();
                let (m, v) = gn_naive(&a, groups);
                for i in 0..m.len() {
                    prop_assert!((s.mean[i] - m[i]).abs() < 1e-12);
                    prop_assert!((s.var[i] - v[i]).abs() < 1e-11);
                }
            }
        }

        #[test]
        fn normalize_then_stats(seed in any::<u64>(), n in 2usize..6, c in 1usize..4, d in 1usize..4) {
            let a = Tensor3::randn(&mut Rng::new(seed), n, c, d, 2.0, 1.5).unwrap();
            let s = bn_stats(&a);
            let eps = DEFAULT_EPS;
            let s2 = bn_stats(&normalize(&a, &s, eps).unwrap());
            for ch in 0..c {
                prop_assert!(s2.mean[ch].abs() < 1e-10);
                let want = s.var[ch] / (s.var[ch] + eps);
                prop_assert!((s2.var[ch] - want).abs() < 1e-6);
            }
        }
    }
}
