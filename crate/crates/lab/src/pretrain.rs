//! Backbone pre-training workflow: collect, train, evaluate, persist.

use std::path::Path;

use curio_core::env::EnvConfig;
use curio_core::pretrain::{
    collect_pretrain_rollouts, pretrain_backbone, temporal_coherence_ratio, Backbone, PretrainConfig,
};
use curio_core::seed::derive_seed;

use crate::checkpoint::{self, BackboneMeta};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainJob {
    pub env: EnvConfig,
    pub steps_per_env: usize,
    pub epochs: usize,
    pub seed: u64,
    pub config: PretrainConfig,
}

/// Held-out rollouts use a seed derived from the job seed and a quarter
/// of the training data per env.
const HELD_OUT_TAG: u64 = 0x4e1d;

/// Trains a backbone, measures its temporal coherence on held-out
/// rollouts against a random-init backbone, and returns both with the
/// metadata to store.
pub fn run_pretrain(job: &PretrainJob) -> Result<(Backbone, BackboneMeta)> {
    if job.epochs == 0 {
        return Err(LabError::Config("pretraining needs at least one epoch".into()));
    }
    let cfg = &job.config;
    let store = collect_pretrain_rollouts(&job.env, cfg.num_envs, job.steps_per_env, job.seed, cfg)?;
    let held_steps = (job.steps_per_env / 4).max(10 * cfg.k_far);
    let held = collect_pretrain_rollouts(
        &job.env,
        cfg.num_envs,
        held_steps,
        derive_seed(job.seed, HELD_OUT_TAG),
        cfg,
    )?;
    let (backbone, losses) = pretrain_backbone(&store, job.epochs, job.seed, cfg)?;
    let mut random = Backbone::new(job.env.obs_shape(), derive_seed(job.seed, HELD_OUT_TAG))?;
    random.freeze();
    let mut meta = BackboneMeta::new(&backbone, cfg);
    meta.env = job.env.kind.name().into();
    meta.seed = job.seed;
    meta.steps_per_env = job.steps_per_env;
    meta.epochs = job.epochs;
    meta.data_digest = store.digest().to_string();
    meta.losses = losses;
    meta.coherence_ratio = Some(temporal_coherence_ratio(&backbone, &held, cfg)?);
    meta.coherence_ratio_random = Some(temporal_coherence_ratio(&random, &held, cfg)?);
    Ok((backbone, meta))
}

pub fn pretrain_to(job: &PretrainJob, out: &Path) -> Result<BackboneMeta> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(LabError::io(parent))?;
    }
    let (backbone, meta) = run_pretrain(job)?;
    checkpoint::save_backbone(out, &backbone, &meta)?;
    Ok(meta)
}
