use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::policy::PolicyNet;
use crate::diff::Tensor;
use crate::digest::{Digest, Hasher};
use crate::env::{batch_observations, Action, EpisodeStats, Observation, VecEnv};
use crate::error::{Error, Result};
use crate::intrinsic::CuriosityModule;

/// `T` lockstep steps from `E` environments. Every per-step array is
/// time-major: entry `t * E + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub steps: usize,
    pub num_envs: usize,
    /// `[T * E, S, H, W]` observations acted on.
    pub obs: Tensor,
    /// `[T * E, S, H, W]` observations that followed; terminal frames on
    /// episode ends.
    pub next_obs: Tensor,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub extrinsic: Vec<f64>,
    /// Normalized intrinsic reward; all zero without curiosity.
    pub intrinsic: Vec<f64>,
    pub intrinsic_raw: Vec<f64>,
    pub dones: Vec<bool>,
    /// `V(s_T)` per environment.
    pub bootstrap: Vec<f64>,
    /// Episodes that finished during the rollout, in step order.
    pub episodes: Vec<EpisodeStats>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.u64(self.steps as u64).u64(self.num_envs as u64);
        h.tensor(&self.obs).tensor(&self.next_obs);
        for a in &self.actions {
            h.u64(*a as u64);
        }
        for d in &self.dones {
            h.u64(*d as u64);
        }
        h.f64s(&self.log_probs)
            .f64s(&self.values)
            .f64s(&self.extrinsic)
            .f64s(&self.intrinsic)
            .f64s(&self.intrinsic_raw)
            .f64s(&self.bootstrap);
        h.finish()
    }
}

/// Runs the policy for `steps` lockstep steps. With a curiosity module,
/// its pixel normalizer is updated with the new observations and the
/// intrinsic rewards are scored on them after collection.
pub fn collect_rollout(
    policy: &PolicyNet,
    envs: &mut dyn VecEnv,
    curiosity: Option<&mut CuriosityModule>,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<RolloutBatch> {
    let e = envs.num_envs();
    if steps == 0 || e == 0 {
        return Err(Error::Config("rollouts need at least one step and one env".into()));
    }
    let n = steps * e;
    let mut obs_list: Vec<Observation> = Vec::with_capacity(n);
    let mut next_list: Vec<Observation> = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut extrinsic = Vec::with_capacity(n);
    let mut dones = Vec::with_capacity(n);
    let mut episodes = Vec::new();
    let mut current = envs.observations();
    for _ in 0..steps {
        let batch = batch_observations(current.iter())?;
        let out = policy.act(&batch, rng)?;
        let chosen = out
            .actions
            .iter()
            .map(|&a| Action::from_index(a))
            .collect::<Result<Vec<_>>>()?;
        let results = envs.step(&chosen)?;
        obs_list.extend(current);
        for r in results {
            extrinsic.push(r.extrinsic_reward);
            dones.push(r.done);
            if let Some(stats) = r.info {
                episodes.push(stats);
            }
            next_list.push(r.obs);
        }
        actions.extend(out.actions);
        log_probs.extend(out.log_probs);
        values.extend(out.values);
        current = envs.observations();
    }
    let (_, bootstrap) = policy.evaluate(&batch_observations(current.iter())?)?;
    let obs = batch_observations(obs_list.iter())?;
    drop(obs_list);
    let next_obs = batch_observations(next_list.iter())?;
    drop(next_list);

    let (intrinsic, intrinsic_raw) = match curiosity {
        Some(module) => {
            module.update_obs_normalizer(&next_obs)?;
            let raw = module.raw_rewards(&next_obs)?;
            (module.normalize_rewards(&raw, &dones, e)?, raw)
        }
        None => (vec![0.0; n], vec![0.0; n]),
    };
    Ok(RolloutBatch {
        steps,
        num_envs: e,
        obs,
        next_obs,
        actions,
        log_probs,
        values,
        extrinsic,
        intrinsic,
        intrinsic_raw,
        dones,
        bootstrap: bootstrap.into_data(),
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, SerialVecEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_single_env_shapes() {
        let cfg = EnvConfig::grid_explore();
        let policy = PolicyNet::new(cfg.obs_shape(), 0).unwrap();
        let mut envs = SerialVecEnv::new(&cfg, 1, 0).unwrap();
        let b = collect_rollout(&policy, &mut envs, None, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.obs.shape(), &[1, 4, 36, 36]);
        assert_eq!(b.next_obs.shape(), &[1, 4, 36, 36]);
        assert_eq!(b.actions.len(), 1);
        assert_eq!(b.bootstrap.len(), 1);
        assert_eq!(b.intrinsic, vec![0.0]);
    }

    #[test]
    fn rollout_digest_is_reproducible() {
        let cfg = EnvConfig::key_door();
        let policy = PolicyNet::new(cfg.obs_shape(), 3).unwrap();
        let run = || {
            let mut envs = SerialVecEnv::new(&cfg, 2, 9).unwrap();
            collect_rollout(&policy, &mut envs, None, 8, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap()
                .digest()
        };
        assert_eq!(run(), run());
    }
}
