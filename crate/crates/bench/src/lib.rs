//! Shared fixtures for the benchmarks.

use adab2n::harness::{Sample, TaskBatch};
use adab2n::{Rng, Tensor3};

/// A batch of `n` standard-normal samples spread evenly over `tasks` tasks.
pub fn gaussian_batch(seed: u64, n: usize, dim: usize, tasks: usize) -> TaskBatch {
    let mut rng = Rng::new(seed);
    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            x: (0..dim).map(|_| rng.normal()).collect(),
            label: i % 10,
            task: i % tasks,
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    TaskBatch::from_samples(&refs, n).expect("non-empty batch")
}

pub fn gaussian_tensor(seed: u64, n: usize, c: usize, d: usize) -> Tensor3 {
    Tensor3::randn(&mut Rng::new(seed), n, c, d, 0.0, 1.0).expect("valid shape")
}
