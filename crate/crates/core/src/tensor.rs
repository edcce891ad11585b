//! Dense `(N, C, D)` tensors in row-major order with the channel on the middle axis.

use crate::error::{arg_error, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    data: Vec<f64>,
    n: usize,
    c: usize,
    d: usize,
}

fn check_dims(n: usize, c: usize, d: usize) -> Result<()> {
    if n == 0 || c == 0 || d == 0 {
        return Err(Error::Shape(format!(
            "all dimensions must be >= 1, got ({n}, {c}, {d})"
        )));
    }
    Ok(())
}

impl Tensor3 {
    pub fn new(n: usize, c: usize, d: usize, fill: f64) -> Result<Self> {
        check_dims(n, c, d)?;
        Ok(Self {
            data: vec![fill; n * c * d],
            n,
            c,
            d,
        })
    }

    pub fn zeros(n: usize, c: usize, d: usize) -> Result<Self> {
        Self::new(n, c, d, 0.0)
    }

    pub fn from_vec(n: usize, c: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(n, c, d)?;
        if data.len() != n * c * d {
            return Err(Error::Shape(format!(
                "data length {} does not match shape ({n}, {c}, {d})",
                data.len()
            )));
        }
        Ok(Self { data, n, c, d })
    }

    /// I.i.d. Gaussian entries drawn from `rng`.
    pub fn randn(rng: &mut Rng, n: usize, c: usize, d: usize, mean: f64, std: f64) -> Result<Self> {
        check_dims(n, c, d)?;
        if !(std >= 0.0) || !std.is_finite() {
            return arg_error(format!("std must be finite and >= 0, got {std}"));
        }
        let data = (0..n * c * d).map(|_| rng.gaussian(mean, std)).collect();
        Ok(Self { data, n, c, d })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.c, self.d)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, d: usize) -> usize {
        (n * self.c + c) * self.d + d
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, d: usize) -> f64 {
        self.data[self.index(n, c, d)]
    }

    /// Entries `a[n, c, :]`.
    #[inline]
    pub fn row(&self, n: usize, c: usize) -> &[f64] {
        let start = self.index(n, c, 0);
        &self.data[start..start + self.d]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            n: self.n,
            c: self.c,
            d: self.d,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            n: self.n,
            c: self.c,
            d: self.d,
        })
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Samples `idx` (in that order) as a new tensor.
    pub fn select_samples(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Shape("cannot select zero samples".into()));
        }
        let stride = self.c * self.d;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= self.n {
                return Err(Error::Shape(format!("sample {i} out of range {}", self.n)));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        Ok(Self {
            data,
            n: idx.len(),
            c: self.c,
            d: self.d,
        })
    }

    pub fn expect_shape(&self, shape: (usize, usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::Shape(format!(
                "expected shape {:?}, got {:?}",
                shape,
                self.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn fill_semantics() {
        let t = Tensor3::new(2, 1, 2, 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor3::new(1, 3, 1, 1.5).unwrap();
        assert_eq!(t.data(), &[1.5; 3]);
        let t = Tensor3::new(2, 2, 2, -1.0).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.data().iter().all(|&x| x == -1.0));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(Tensor3::new(0, 1, 1, 0.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor3::new(1, 0, 1, 0.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor3::from_vec(1, 1, 2, vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn randn_degenerate_and_errors() {
        let mut rng = Rng::new(1);
        let t = Tensor3::randn(&mut rng, 3, 2, 2, 4.0, 0.0).unwrap();
        assert!(t.data().iter().all(|&x| x == 4.0));
        assert!(matches!(
            Tensor3::randn(&mut rng, 1, 1, 1, 0.0, -1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn randn_deterministic() {
        let a = Tensor3::randn(&mut Rng::new(9), 4, 3, 2, 0.0, 1.0).unwrap();
        let b = Tensor3::randn(&mut Rng::new(9), 4, 3, 2, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn randn_sample_mean() {
        let t = Tensor3::randn(&mut Rng::new(7), 1000, 1, 1, 0.0, 1.0).unwrap();
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn layout_is_channel_middle() {
        let t = Tensor3::from_vec(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(1, 0, 2), 8.0);
        assert_eq!(t.row(0, 1), &[3.0, 4.0, 5.0]);
    }

    proptest! {
        #[test]
        fn shape_algebra(n in 1usize..6, c in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
            let a = Tensor3::randn(&mut Rng::new(seed), n, c, d, 0.0, 1.0).unwrap();
            prop_assert_eq!(a.len(), n * c * d);
            let b = a.map(|x| 2.0 * x);
            prop_assert_eq!(b.shape(), (n, c, d));
            let s = a.zip_map(&b, |x, y| x + y).unwrap();
            prop_assert_eq!(s.len(), n * c * d);
            prop_assert!(s.is_finite());
            let idx: Vec<usize> = (0..n).rev().collect();
            let r = a.select_samples(&idx).unwrap();
            prop_assert_eq!(r.shape(), (n, c, d));
        }
    }
}
