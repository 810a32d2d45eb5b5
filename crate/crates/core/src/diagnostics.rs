//! Analyses of intrinsic-reward behavior: how reward differences between
//! probe observations relate to their distances, and how quickly the
//! reward stream decays over training.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::digest::{Digest, Hasher};
use crate::embed::{embed_chunked, row_distance, Embedder};
use crate::env::{batch_observations, Action, EnvConfig, GridEnv, Observation};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream};

pub const DEFAULT_PROBE_SIZE: usize = 64;

/// Fixed observations on which reward snapshots are compared over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    obs: Tensor,
}

impl ProbeSet {
    pub fn new(obs: Tensor) -> Result<Self> {
        if obs.shape().len() != 4 || obs.shape()[0] < 2 {
            return Err(Error::Invalid("a probe set needs at least two observations [K, S, H, W]".into()));
        }
        Ok(ProbeSet { obs })
    }

    /// `k` observations sampled uniformly from a random-policy rollout of
    /// `4 * k` steps. Depends only on the env config and `seed`, so every
    /// algorithm in an experiment sees the same probes.
    pub fn sample(env: &EnvConfig, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config("probe size must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::PROBE));
        let mut grid = GridEnv::new(env.clone())?;
        let mut obs = grid.reset(rng.next_u64());
        let mut pool: Vec<Observation> = Vec::with_capacity(4 * k);
        while pool.len() < 4 * k {
            pool.push(obs.clone());
            let a = Action::from_index(rng.random_range(0..Action::COUNT))?;
            let r = grid.step(a)?;
            obs = if r.done { grid.reset(rng.next_u64()) } else { r.obs };
        }
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
        picked.sort_unstable();
        Self::new(batch_observations(picked.iter().map(|&i| &pool[i]))?)
    }

    pub fn len(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn observations(&self) -> &Tensor {
        &self.obs
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.tensor(&self.obs);
        h.finish()
    }
}

/// Symmetric `K x K` matrix with zero diagonal, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix {
    k: usize,
    data: Vec<f64>,
}

impl PairwiseMatrix {
    /// Builds from `f(i, j)` evaluated on the strict upper triangle.
    pub fn from_fn(k: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let v = f(i, j);
                data[i * k + j] = v;
                data[j * k + i] = v;
            }
        }
        PairwiseMatrix { k, data }
    }

    /// Validates symmetry and the zero diagonal.
    pub fn from_rows(k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * k {
            return Err(Error::shape("pairwise matrix", &[k, k], &[data.len()]));
        }
        for i in 0..k {
            if data[i * k + i] != 0.0 {
                return Err(Error::Invalid("pairwise matrix diagonal must be zero".into()));
            }
            for j in i + 1..k {
                if data[i * k + j] != data[j * k + i] {
                    return Err(Error::Invalid("pairwise matrix must be symmetric".into()));
                }
            }
        }
        Ok(PairwiseMatrix { k, data })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k.max(1))
    }

    /// Strict upper triangle, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let k = self.k;
        (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| self.data[i * k + j])
            .collect()
    }
}

/// `M[i][j] = |r_i - r_j|`.
pub fn reward_diff_matrix(rewards: &[f64]) -> Result<PairwiseMatrix> {
    if rewards.len() < 2 {
        return Err(Error::Invalid("reward_diff_matrix needs at least two rewards".into()));
    }
    Ok(PairwiseMatrix::from_fn(rewards.len(), |i, j| (rewards[i] - rewards[j]).abs()))
}

/// Euclidean distances between embedded probe observations.
pub fn obs_distance_matrix(probe: &ProbeSet, embed: &dyn Embedder) -> Result<PairwiseMatrix> {
    let e = embed_chunked(embed, probe.observations(), 256)?;
    if e.shape().len() != 2 || e.shape()[0] != probe.len() {
        return Err(Error::shape("embedding", &[probe.len(), 0], e.shape()));
    }
    Ok(PairwiseMatrix::from_fn(probe.len(), |i, j| row_distance(&e, i, &e, j)))
}

/// Pearson correlation over the strict upper triangles of two matrices.
/// Undefined when either triangle is constant.
pub fn pairwise_correlation(a: &PairwiseMatrix, b: &PairwiseMatrix) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::shape("pairwise_correlation", &[a.size()], &[b.size()]));
    }
    let (x, y) = (a.upper_triangle(), b.upper_triangle());
    if x.is_empty() {
        return Err(Error::Undefined("correlation needs at least one pair"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (u, v) in x.iter().zip(&y) {
        let (du, dv) = (u - mx, v - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant triangle"));
    }
    // sqrt of the product keeps the result symmetric in (a, b)
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Summary of how an intrinsic-reward series decays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayMetrics {
    pub window: usize,
    pub initial_mean: f64,
    pub final_mean: f64,
    /// First index where the smoothed series is at most half the initial
    /// window mean; `None` if that never happens.
    pub half_life: Option<usize>,
}

pub const MIN_DECAY_SERIES: usize = 20;
const SMOOTH_WIDTH: usize = 5;

/// Centered moving average of width 5, truncated at the ends.
pub fn smooth(series: &[f64]) -> Vec<f64> {
    let half = SMOOTH_WIDTH / 2;
    (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn decay_metrics(series: &[f64]) -> Result<DecayMetrics> {
    if series.len() < MIN_DECAY_SERIES {
        return Err(Error::Invalid(alloc::format!(
            "decay metrics need at least {MIN_DECAY_SERIES} points, got {}",
            series.len()
        )));
    }
    let window = series.len() / 10;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let initial_mean = mean(&series[..window]);
    let final_mean = mean(&series[series.len() - window..]);
    let threshold = initial_mean / 2.0;
    let half_life = smooth(series).iter().position(|&v| v <= threshold);
    // a constant non-negative series never halves unless it is zero
    let half_life = if initial_mean == 0.0 { None } else { half_life };
    Ok(DecayMetrics {
        window,
        initial_mean,
        final_mean,
        half_life,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::RawPixels;

    #[test]
    fn constant_rewards_give_zero_matrix() {
        let m = reward_diff_matrix(&[0.7; 5]).unwrap();
        assert!(m.rows().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn small_reward_example() {
        let m = reward_diff_matrix(&[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(m.get(0, 2), 3.0);
        assert_eq!(m.get(1, 2), 2.0);
        assert_eq!(m.get(2, 1), 2.0);
    }

    #[test]
    fn one_pixel_apart_is_distance_one() {
        let mut a = vec![0.0; 2 * 1 * 2 * 2];
        a[0] = 1.0;
        let probe = ProbeSet::new(Tensor::new(vec![2, 1, 2, 2], a).unwrap()).unwrap();
        let m = obs_distance_matrix(&probe, &RawPixels).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn affine_and_negated_correlations() {
        let a = reward_diff_matrix(&[0.0, 1.0, 3.0, 7.0]).unwrap();
        let b = PairwiseMatrix::from_fn(4, |i, j| 2.0 * a.get(i, j) + 3.0);
        assert!((pairwise_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = PairwiseMatrix::from_fn(4, |i, j| -a.get(i, j));
        assert!((pairwise_correlation(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_triangle_is_undefined() {
        let a = reward_diff_matrix(&[1.0; 4]).unwrap();
        let b = reward_diff_matrix(&[0.0, 1.0, 3.0, 7.0]).unwrap();
        assert!(matches!(pairwise_correlation(&a, &b), Err(Error::Undefined(_))));
    }

    #[test]
    fn asymmetric_rows_are_rejected() {
        assert!(PairwiseMatrix::from_rows(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(PairwiseMatrix::from_rows(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
        assert!(PairwiseMatrix::from_rows(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn constant_series_never_halves() {
        let d = decay_metrics(&[2.0; 30]).unwrap();
        assert_eq!(d.half_life, None);
        assert_eq!(d.initial_mean, d.final_mean);
        assert_eq!(d.window, 3);
    }

    #[test]
    fn short_series_is_an_error() {
        assert!(decay_metrics(&[1.0; 19]).is_err());
    }

    #[test]
    fn probe_sampling_is_seeded() {
        let env = EnvConfig::key_door();
        let a = ProbeSet::sample(&env, 8, 3).unwrap();
        let b = ProbeSet::sample(&env, 8, 3).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.len(), 8);
    }
}
