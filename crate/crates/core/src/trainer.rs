//! The training loop: rollouts, PPO updates, predictor training, per-update
//! metric rows and periodic probe snapshots.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::agent::{collect_rollout, PolicyNet, PpoConfig, PpoLearner, PpoStats, RolloutBatch};
use crate::diagnostics::{
    obs_distance_matrix, pairwise_correlation, reward_diff_matrix, PairwiseMatrix, ProbeSet,
    DEFAULT_PROBE_SIZE,
};
use crate::embed::{Embedder, RawPixels};
use crate::env::{EnvConfig, SerialVecEnv, VecEnv};
use crate::error::{Error, Result};
use crate::intrinsic::{CuriosityConfig, CuriosityModule, Variant};
use crate::pretrain::Backbone;
use crate::seed::{derive_seed, rng_for, stream};

/// Which intrinsic reward, if any, the agent receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    None,
    Curious(Variant),
}

impl Algo {
    pub const ALL: [Algo; 4] = [
        Algo::None,
        Algo::Curious(Variant::Rnd),
        Algo::Curious(Variant::RndLr),
        Algo::Curious(Variant::PreNd),
    ];

    pub fn from_name(name: &str) -> Result<Algo> {
        match name {
            "none" => Ok(Algo::None),
            other => Variant::from_name(other).map(Algo::Curious),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algo::None => "none",
            Algo::Curious(v) => v.name(),
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Algo::None => None,
            Algo::Curious(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub algo: Algo,
    pub seed: u64,
    pub total_steps: usize,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub ppo: PpoConfig,
    pub curiosity: CuriosityConfig,
    pub probe_size: usize,
    /// Probe snapshots are taken each time training crosses another
    /// multiple of this fraction of `total_steps`.
    pub snapshot_fraction: f64,
}

impl TrainConfig {
    pub fn new(env: EnvConfig, algo: Algo, seed: u64, total_steps: usize) -> Self {
        TrainConfig {
            env,
            algo,
            seed,
            total_steps,
            num_envs: 8,
            rollout_steps: 128,
            ppo: PpoConfig::default(),
            curiosity: CuriosityConfig::default(),
            probe_size: DEFAULT_PROBE_SIZE,
            snapshot_fraction: 0.05,
        }
    }

    pub fn steps_per_update(&self) -> usize {
        self.num_envs * self.rollout_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.curiosity.validate()?;
        if self.num_envs == 0 || self.rollout_steps == 0 {
            return Err(Error::Config("num_envs and rollout_steps must be positive".into()));
        }
        if self.total_steps < self.steps_per_update() {
            return Err(Error::Config(format!(
                "steps ({}) must be at least rollout_steps x num_envs ({})",
                self.total_steps,
                self.steps_per_update()
            )));
        }
        if self.probe_size < 2 {
            return Err(Error::Config("probe_size must be at least 2".into()));
        }
        if !(self.snapshot_fraction > 0.0 && self.snapshot_fraction <= 1.0) {
            return Err(Error::Config("snapshot_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Env-step counts after which probe snapshots are taken: the first
    /// update at or past each multiple of `snapshot_fraction * total_steps`.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        let per = self.steps_per_update();
        let updates = self.total_steps / per;
        let mut out: Vec<usize> = Vec::new();
        let mut k = 1usize;
        for u in 1..=updates {
            let step = u * per;
            let mut crossed = false;
            while (k as f64) * self.snapshot_fraction <= 1.0 + 1e-12
                && step as f64 >= libm::ceil(k as f64 * self.snapshot_fraction * self.total_steps as f64)
            {
                crossed = true;
                k += 1;
            }
            if crossed {
                out.push(step);
            }
        }
        out
    }
}

/// One record per update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    /// Environment steps taken so far.
    pub step: usize,
    /// Mean return of episodes finished during this update; carries the
    /// previous value when none finished (0 before the first).
    pub episode_return_mean: f64,
    pub intrinsic_raw_mean: f64,
    pub intrinsic_raw_std: f64,
    pub predictor_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

impl MetricRow {
    pub const COLUMNS: [&'static str; 8] = [
        "step",
        "episode_return_mean",
        "intrinsic_raw_mean",
        "intrinsic_raw_std",
        "predictor_loss",
        "policy_loss",
        "value_loss",
        "entropy",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.episode_return_mean,
            self.intrinsic_raw_mean,
            self.intrinsic_raw_std,
            self.predictor_loss,
            self.policy_loss,
            self.value_loss,
            self.entropy,
        ]
    }
}

/// Raw intrinsic rewards on the probe set at one point in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub probe_rewards: Vec<f64>,
    pub reward_diff: PairwiseMatrix,
    /// `(embed kind, correlation)`; `None` when undefined.
    pub correlations: Vec<(&'static str, Option<f64>)>,
}

#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Metric(&'a MetricRow),
    Snapshot(&'a Snapshot),
}

struct ProbeState {
    probe: ProbeSet,
    distances: Vec<(&'static str, PairwiseMatrix)>,
    pending: VecDeque<usize>,
}

pub struct Trainer {
    config: TrainConfig,
    envs: Box<dyn VecEnv + Send>,
    policy: PolicyNet,
    learner: PpoLearner,
    curiosity: Option<CuriosityModule>,
    sampling_rng: ChaCha8Rng,
    minibatch_rng: ChaCha8Rng,
    curiosity_rng: ChaCha8Rng,
    probe: Option<ProbeState>,
    step: usize,
    last_return: f64,
}

impl Trainer {
    /// Builds a trainer on serially stepped environments.
    pub fn new(config: TrainConfig, backbone: Option<Arc<Backbone>>) -> Result<Self> {
        let envs = SerialVecEnv::new(&config.env, config.num_envs, derive_seed(config.seed, stream::ENVS))?;
        Self::with_envs(config, Box::new(envs), backbone)
    }

    /// Builds a trainer on caller-supplied environments, which must be
    /// seeded from `derive_seed(config.seed, stream::ENVS)` for runs to be
    /// reproducible. The backbone feeds PreND and, for every curious algo,
    /// the backbone-embedding correlation.
    pub fn with_envs(
        config: TrainConfig,
        envs: Box<dyn VecEnv + Send>,
        backbone: Option<Arc<Backbone>>,
    ) -> Result<Self> {
        config.validate()?;
        if envs.num_envs() != config.num_envs {
            return Err(Error::shape("envs", &[config.num_envs], &[envs.num_envs()]));
        }
        if let Some(b) = &backbone {
            if !b.is_frozen() {
                return Err(Error::Config("the backbone must be frozen before training".into()));
            }
        }
        let obs_shape = config.env.obs_shape();
        let policy = PolicyNet::new(obs_shape, derive_seed(config.seed, stream::POLICY_INIT))?;
        let mut learner = PpoLearner::new(config.ppo, &policy)?;
        // beta = 0 must reproduce the no-curiosity trajectory exactly
        learner.set_non_episodic(
            config.algo != Algo::None && config.curiosity.non_episodic && config.ppo.beta != 0.0,
        );
        let curiosity = match config.algo.variant() {
            None => None,
            Some(v) => {
                let b = if v.uses_backbone() {
                    Some(backbone.clone().ok_or_else(|| {
                        Error::Config("prend needs a pre-trained backbone".into())
                    })?)
                } else {
                    None
                };
                Some(CuriosityModule::build(v, config.seed, obs_shape, b, config.curiosity)?)
            }
        };
        let probe = if curiosity.is_some() {
            let probe = ProbeSet::sample(&config.env, config.probe_size, config.seed)?;
            let mut distances = Vec::new();
            distances.push((RawPixels.kind(), obs_distance_matrix(&probe, &RawPixels)?));
            if let Some(b) = &backbone {
                distances.push((b.kind(), obs_distance_matrix(&probe, b.as_ref())?));
            }
            Some(ProbeState {
                probe,
                distances,
                pending: config.snapshot_steps().into(),
            })
        } else {
            None
        };
        Ok(Trainer {
            sampling_rng: rng_for(config.seed, stream::POLICY_SAMPLING),
            minibatch_rng: rng_for(config.seed, stream::PPO_MINIBATCHES),
            curiosity_rng: rng_for(config.seed, stream::CURIOSITY_BATCHES),
            config,
            envs,
            policy,
            learner,
            curiosity,
            probe,
            step: 0,
            last_return: 0.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step + self.config.steps_per_update() > self.config.total_steps
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn curiosity(&self) -> Option<&CuriosityModule> {
        self.curiosity.as_ref()
    }

    pub fn probe(&self) -> Option<&ProbeSet> {
        self.probe.as_ref().map(|p| &p.probe)
    }

    /// One rollout plus updates. Returns the metric row and, when a
    /// snapshot boundary was crossed, the probe snapshot.
    pub fn update(&mut self) -> Result<(MetricRow, Option<Snapshot>)> {
        let batch = collect_rollout(
            &self.policy,
            self.envs.as_mut(),
            self.curiosity.as_mut(),
            self.config.rollout_steps,
            &mut self.sampling_rng,
        )?;
        let stats = self.learner.update(&mut self.policy, &batch, &mut self.minibatch_rng)?;
        let predictor_loss = match &mut self.curiosity {
            Some(m) => m.train_predictor(&batch.next_obs, &mut self.curiosity_rng)?,
            None => 0.0,
        };
        self.step += batch.len();
        let row = self.metric_row(&batch, &stats, predictor_loss);
        let snapshot = self.maybe_snapshot()?;
        Ok((row, snapshot))
    }

    fn metric_row(&mut self, batch: &RolloutBatch, stats: &PpoStats, predictor_loss: f64) -> MetricRow {
        if !batch.episodes.is_empty() {
            self.last_return = batch.episodes.iter().map(|e| e.episode_return).sum::<f64>()
                / batch.episodes.len() as f64;
        }
        let n = batch.intrinsic_raw.len() as f64;
        let mean = batch.intrinsic_raw.iter().sum::<f64>() / n;
        let var = batch.intrinsic_raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        MetricRow {
            step: self.step,
            episode_return_mean: self.last_return,
            intrinsic_raw_mean: mean,
            intrinsic_raw_std: libm::sqrt(var),
            predictor_loss,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
        }
    }

    fn maybe_snapshot(&mut self) -> Result<Option<Snapshot>> {
        let (Some(state), Some(module)) = (&mut self.probe, &self.curiosity) else {
            return Ok(None);
        };
        if state.pending.front() != Some(&self.step) {
            return Ok(None);
        }
        state.pending.pop_front();
        let probe_rewards = module.raw_rewards(state.probe.observations())?;
        let reward_diff = reward_diff_matrix(&probe_rewards)?;
        let mut correlations = Vec::with_capacity(state.distances.len());
        for (kind, dist) in &state.distances {
            let c = match pairwise_correlation(&reward_diff, dist) {
                Ok(c) => Some(c),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            correlations.push((*kind, c));
        }
        Ok(Some(Snapshot {
            step: self.step,
            probe_rewards,
            reward_diff,
            correlations,
        }))
    }

    /// Runs to completion, handing every row and snapshot to `sink` in
    /// step order.
    pub fn run(&mut self, mut sink: impl FnMut(TrainEvent<'_>) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let (row, snapshot) = self.update()?;
            sink(TrainEvent::Metric(&row))?;
            if let Some(s) = &snapshot {
                sink(TrainEvent::Snapshot(s))?;
            }
        }
        Ok(())
    }
}

/// Collected output of an in-memory run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    pub snapshots: Vec<Snapshot>,
}

impl RunRecord {
    pub fn series(&self, f: impl Fn(&MetricRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    /// Mean correlation of one embedding kind over the snapshots where it
    /// was defined.
    pub fn mean_correlation(&self, kind: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .snapshots
            .iter()
            .flat_map(|s| s.correlations.iter())
            .filter(|(k, _)| *k == kind)
            .filter_map(|(_, c)| *c)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Trains to completion and keeps everything in memory.
pub fn train(config: TrainConfig, backbone: Option<Arc<Backbone>>) -> Result<(Trainer, RunRecord)> {
    let mut trainer = Trainer::new(config, backbone)?;
    let mut record = RunRecord::default();
    trainer.run(|event| {
        match event {
            TrainEvent::Metric(row) => record.rows.push(*row),
            TrainEvent::Snapshot(s) => record.snapshots.push(s.clone()),
        }
        Ok(())
    })?;
    Ok((trainer, record))
}

/// `algo` names accepted on the command line.
pub fn algo_names() -> String {
    Algo::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
}
