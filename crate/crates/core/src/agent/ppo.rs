use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::gae::gae;
use super::policy::{PolicyNet, PolicyVars};
use super::rollout::RolloutBatch;
use crate::diff::{adam_step, clip_grad_norm_groups, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    /// Weight of the normalized intrinsic reward in the combined reward.
    pub beta: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 2.5e-4,
            adam_eps: 1e-5,
            max_grad_norm: 0.5,
            beta: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) || !unit(self.lambda) {
            return Err(Error::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Config("epochs and minibatches must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.adam_eps > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("lr, adam_eps and max_grad_norm must be positive".into()));
        }
        if !self.beta.is_finite() || !self.entropy_coef.is_finite() || !self.value_coef.is_finite() {
            return Err(Error::Config("loss coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// Scalar loss terms of one PPO objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoTerms {
    /// `-mean(min(ratio * A, clip(ratio) * A))`
    pub policy_loss: f64,
    /// `0.5 * mean((V - R)^2)`
    pub value_loss: f64,
    pub entropy: f64,
    /// `policy_loss + value_coef * value_loss - entropy_coef * entropy`
    pub total: f64,
}

/// Averages over the minibatch steps of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Shifts and scales to mean 0, std 1 over the whole batch; the std is
/// floored at 1e-8.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var).max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

struct LossVars {
    total: Var,
    policy: Var,
    value: Var,
    entropy: Var,
    log_ratio: Var,
}

fn record_loss(
    tape: &mut Tape,
    out: &PolicyVars,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<LossVars> {
    let n = actions.len();
    if old_log_probs.len() != n || advantages.len() != n || returns.len() != n {
        return Err(Error::shape(
            "ppo_loss",
            &[n],
            &[old_log_probs.len(), advantages.len(), returns.len()],
        ));
    }
    let new_lp = tape.gather(out.log_probs, actions)?;
    let old_lp = tape.constant(&[n], old_log_probs.to_vec())?;
    let log_ratio = tape.sub(new_lp, old_lp)?;
    let ratio = tape.exp(log_ratio)?;
    let adv = tape.constant(&[n], advantages.to_vec())?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surrogate = tape.mean(surrogate)?;
    let policy = tape.scale(surrogate, -1.0)?;

    let ret = tape.constant(&[n], returns.to_vec())?;
    let err = tape.sub(out.values, ret)?;
    let sq = tape.square(err)?;
    let mse = tape.mean(sq)?;
    let value = tape.scale(mse, 0.5)?;

    let probs = tape.exp(out.log_probs)?;
    let plogp = tape.mul(probs, out.log_probs)?;
    let neg_ent = tape.sum_rows(plogp)?;
    let neg_ent = tape.mean(neg_ent)?;
    let entropy = tape.scale(neg_ent, -1.0)?;

    let v_term = tape.scale(value, cfg.value_coef)?;
    let e_term = tape.scale(entropy, -cfg.entropy_coef)?;
    let total = tape.add(policy, v_term)?;
    let total = tape.add(total, e_term)?;
    Ok(LossVars {
        total,
        policy,
        value,
        entropy,
        log_ratio,
    })
}

/// Evaluates the PPO objective of `policy` on a batch without updating.
pub fn ppo_terms(
    policy: &PolicyNet,
    obs: &Tensor,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<PpoTerms> {
    let mut tape = Tape::new();
    let x = tape.leaf(obs);
    let out = policy.forward(&mut tape, x, false)?;
    let l = record_loss(&mut tape, &out, actions, old_log_probs, advantages, returns, cfg)?;
    Ok(PpoTerms {
        policy_loss: tape.value(l.policy)[0],
        value_loss: tape.value(l.value)[0],
        entropy: tape.value(l.entropy)[0],
        total: tape.value(l.total)[0],
    })
}

/// Optimizer state for the policy network, one Adam per sub-network.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    config: PpoConfig,
    optimizers: [AdamState; 3],
    non_episodic: bool,
}

impl PpoLearner {
    pub fn new(config: PpoConfig, policy: &PolicyNet) -> Result<Self> {
        config.validate()?;
        let parts = policy.parts();
        let adam = |i: usize| AdamState::with_hyper(config.lr, 0.9, 0.999, config.adam_eps, parts[i].1.params());
        Ok(PpoLearner {
            config,
            optimizers: [adam(0), adam(1), adam(2)],
            non_episodic: false,
        })
    }

    /// With a single value head the intrinsic part of the return cannot be
    /// bootstrapped separately, so keeping intrinsic returns uncut at
    /// episode ends means ignoring done flags for the whole combined
    /// return. Otherwise a positive bonus teaches the agent to avoid
    /// reaching the goal.
    pub fn set_non_episodic(&mut self, on: bool) {
        self.non_episodic = on;
    }

    pub fn is_non_episodic(&self) -> bool {
        self.non_episodic
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    pub fn optimizers(&self) -> &[AdamState; 3] {
        &self.optimizers
    }

    /// Combined per-step reward: extrinsic plus `beta` times normalized
    /// intrinsic.
    pub fn combined_rewards(&self, batch: &RolloutBatch) -> Vec<f64> {
        batch
            .extrinsic
            .iter()
            .zip(&batch.intrinsic)
            .map(|(e, i)| e + self.config.beta * i)
            .collect()
    }

    /// Advantages (already normalized) and returns for a batch.
    pub fn targets(&self, batch: &RolloutBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let rewards = self.combined_rewards(batch);
        let uncut;
        let dones = if self.non_episodic {
            uncut = vec![false; batch.dones.len()];
            &uncut[..]
        } else {
            &batch.dones[..]
        };
        let (mut adv, returns) = gae(
            &rewards,
            &batch.values,
            dones,
            &batch.bootstrap,
            self.config.gamma,
            self.config.lambda,
        )?;
        normalize_advantages(&mut adv);
        Ok((adv, returns))
    }

    pub fn update(&mut self, policy: &mut PolicyNet, batch: &RolloutBatch, rng: &mut impl Rng) -> Result<PpoStats> {
        let (adv, returns) = self.targets(batch)?;
        let n = adv.len();
        let mb = (n / self.config.minibatches).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut stats = PpoStats::default();
        let mut steps = 0usize;
        for _ in 0..self.config.epochs {
            order.shuffle(rng);
            for idx in order.chunks(mb) {
                let obs = batch.obs.select_rows(idx)?;
                let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
                let actions: Vec<usize> = idx.iter().map(|&i| batch.actions[i]).collect();
                let mut tape = Tape::new();
                let x = tape.leaf(&obs);
                let out = policy.forward(&mut tape, x, true)?;
                let l = record_loss(
                    &mut tape,
                    &out,
                    &actions,
                    &pick(&batch.log_probs),
                    &pick(&adv),
                    &pick(&returns),
                    &self.config,
                )?;
                let total = tape.value(l.total)[0];
                if !total.is_finite() {
                    return Err(Error::NonFinite { op: "ppo_loss" });
                }
                let lr = tape.value(l.log_ratio);
                let m = lr.len() as f64;
                stats.approx_kl += lr.iter().map(|r| libm::exp(*r) - 1.0 - r).sum::<f64>() / m;
                stats.clip_fraction += lr
                    .iter()
                    .filter(|r| (libm::exp(**r) - 1.0).abs() > self.config.clip)
                    .count() as f64
                    / m;
                stats.policy_loss += tape.value(l.policy)[0];
                stats.value_loss += tape.value(l.value)[0];
                stats.entropy += tape.value(l.entropy)[0];

                let grads = tape.backward(l.total)?;
                let parts = policy.parts_mut();
                for (net, bound) in parts.into_iter().zip(&out.bounds) {
                    net.store_grads(bound, &grads)?;
                }
                let [trunk, pi, v] = policy.parts_mut();
                stats.grad_norm += clip_grad_norm_groups(
                    &mut [trunk.params_mut(), pi.params_mut(), v.params_mut()],
                    self.config.max_grad_norm,
                );
                for (opt, net) in self.optimizers.iter_mut().zip(policy.parts_mut()) {
                    adam_step(opt, net.params_mut())?;
                }
                steps += 1;
            }
        }
        let k = steps.max(1) as f64;
        Ok(PpoStats {
            policy_loss: stats.policy_loss / k,
            value_loss: stats.value_loss / k,
            entropy: stats.entropy / k,
            approx_kl: stats.approx_kl / k,
            clip_fraction: stats.clip_fraction / k,
            grad_norm: stats.grad_norm / k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_advantages_have_unit_moments() {
        let mut a = alloc::vec![1.0, 2.0, 4.0, 8.0];
        normalize_advantages(&mut a);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_advantages_become_zero() {
        let mut a = alloc::vec![3.0; 5];
        normalize_advantages(&mut a);
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn same_policy_means_unit_ratio() {
        let policy = PolicyNet::new([4, 36, 36], 0).unwrap();
        let obs = Tensor::zeros(&[3, 4, 36, 36]);
        let (lp, v) = policy.evaluate(&obs).unwrap();
        let actions = [0, 3, 4];
        let old: Vec<f64> = actions.iter().enumerate().map(|(i, &a)| lp.data()[i * 5 + a]).collect();
        let adv = [1.0, -0.5, 2.0];
        let cfg = PpoConfig::default();
        let t = ppo_terms(&policy, &obs, &actions, &old, &adv, v.data(), &cfg).unwrap();
        assert!((t.policy_loss + (1.0 - 0.5 + 2.0) / 3.0).abs() < 1e-12);
        assert_eq!(t.value_loss, 0.0);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = PpoConfig {
            gamma: 1.5,
            ..PpoConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
