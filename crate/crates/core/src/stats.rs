use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Running per-element mean and population variance.
///
/// Batches are merged with the parallel (Chan et al.) form of Welford's
/// update, so feeding one batch or any split of it gives the same moments
/// up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMeanStd {
    count: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl RunningMeanStd {
    pub fn new(dim: usize) -> Self {
        RunningMeanStd {
            count: 0.0,
            mean: vec![0.0; dim],
            var: vec![0.0; dim],
        }
    }

    pub fn scalar() -> Self {
        Self::new(1)
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// Merges a batch laid out as rows of `dim` values.
    pub fn update(&mut self, batch: &[f64]) -> Result<()> {
        let dim = self.dim();
        if dim == 0 || batch.len() % dim != 0 {
            return Err(Error::shape("running_mean_std", &[dim], &[batch.len()]));
        }
        let n = batch.len() / dim;
        if n == 0 {
            return Ok(());
        }
        let mut b_mean = vec![0.0; dim];
        for row in batch.chunks_exact(dim) {
            for (m, v) in b_mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        b_mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut b_var = vec![0.0; dim];
        for row in batch.chunks_exact(dim) {
            for j in 0..dim {
                let d = row[j] - b_mean[j];
                b_var[j] += d * d;
            }
        }
        b_var.iter_mut().for_each(|v| *v /= n as f64);
        self.merge_moments(n as f64, &b_mean, &b_var);
        Ok(())
    }

    pub fn update_scalar(&mut self, values: &[f64]) -> Result<()> {
        if self.dim() != 1 {
            return Err(Error::shape("running_mean_std", &[self.dim()], &[1]));
        }
        self.update(values)
    }

    pub fn merge(&mut self, other: &RunningMeanStd) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::shape("running_mean_std merge", &[self.dim()], &[other.dim()]));
        }
        if other.count > 0.0 {
            self.merge_moments(other.count, &other.mean, &other.var);
        }
        Ok(())
    }

    fn merge_moments(&mut self, n_b: f64, mean_b: &[f64], var_b: &[f64]) {
        let n_a = self.count;
        let total = n_a + n_b;
        for j in 0..self.mean.len() {
            let delta = mean_b[j] - self.mean[j];
            let m2 = self.var[j] * n_a + var_b[j] * n_b + delta * delta * n_a * n_b / total;
            self.mean[j] += delta * n_b / total;
            self.var[j] = (m2 / total).max(0.0);
        }
        self.count = total;
    }

    pub fn std(&self, j: usize) -> f64 {
        libm::sqrt(self.var[j])
    }

    /// `(x - mean) / sqrt(var + 1e-8)` clipped to `[-clip, clip]`, row-wise.
    pub fn normalize_clipped(&self, batch: &[f64], clip: f64) -> Vec<f64> {
        let dim = self.dim();
        let inv: Vec<f64> = self.var.iter().map(|v| 1.0 / libm::sqrt(v + 1e-8)).collect();
        batch
            .chunks_exact(dim)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&inv)
                    .map(move |((x, m), s)| ((x - m) * s).clamp(-clip, clip))
            })
            .collect()
    }
}

/// Per-environment discounted running sum of a reward stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedReturn {
    gamma: f64,
    running: Vec<f64>,
}

impl DiscountedReturn {
    pub fn new(num_envs: usize, gamma: f64) -> Self {
        DiscountedReturn {
            gamma,
            running: vec![0.0; num_envs],
        }
    }

    /// Feeds one time step across all envs and returns the updated sums.
    /// Envs flagged in `reset` start from zero on the next step.
    pub fn push(&mut self, rewards: &[f64], reset: &[bool]) -> Vec<f64> {
        let out: Vec<f64> = self
            .running
            .iter_mut()
            .zip(rewards)
            .map(|(acc, r)| {
                *acc = *acc * self.gamma + r;
                *acc
            })
            .collect();
        for (acc, &done) in self.running.iter_mut().zip(reset) {
            if done {
                *acc = 0.0;
            }
        }
        out
    }
}
