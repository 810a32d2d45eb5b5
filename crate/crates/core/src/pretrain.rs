//! Self-supervised backbone pre-training on random-policy rollouts.
//!
//! The backbone is trained with a triplet margin loss so that frames close
//! in time land close in feature space and frames far apart in time land
//! far apart. After training it is frozen.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{adam_step, AdamState, LayerSpec, Sequential, Tape, Tensor, Var};
use crate::digest::{digest_tensors, Digest, Hasher};
use crate::embed::{embed_chunked, row_distance, Embedder};
use crate::env::{Action, EnvConfig, GridEnv, Observation};
use crate::error::{Error, Result};
use crate::nets::{conv_stack, flat_features, relu_gains, BACKBONE_CHANNELS};
use crate::seed::{derive_seed, stream};

/// Feature map produced by the backbone, `(C, h, w)`.
pub const FEATURE_SHAPE: [usize; 3] = [64, 4, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    net: Sequential,
    feature_shape: [usize; 3],
    frozen: bool,
}

impl Backbone {
    pub fn specs(obs_shape: [usize; 3]) -> Result<Vec<LayerSpec>> {
        let mut specs = conv_stack(obs_shape[0], BACKBONE_CHANNELS);
        let flat = flat_features(&obs_shape, &specs)?;
        specs.push(LayerSpec::Dense {
            inputs: flat,
            outputs: FEATURE_SHAPE.iter().product(),
        });
        specs.push(LayerSpec::Relu);
        Ok(specs)
    }

    /// Randomly initialized, trainable backbone.
    pub fn new(obs_shape: [usize; 3], seed: u64) -> Result<Self> {
        let specs = Self::specs(obs_shape)?;
        let net = Sequential::new(&obs_shape, &specs, &relu_gains(&specs), seed)?;
        Ok(Backbone {
            net,
            feature_shape: FEATURE_SHAPE,
            frozen: false,
        })
    }

    /// Wraps an already-built network (e.g. loaded from a checkpoint).
    pub fn from_network(net: Sequential, frozen: bool) -> Result<Self> {
        let expected = Self::specs([
            net.input_shape()[0],
            net.input_shape()[1],
            net.input_shape()[2],
        ])?;
        if net.specs() != expected.as_slice() {
            return Err(Error::Invalid("network does not have the backbone layout".into()));
        }
        Ok(Backbone {
            net,
            feature_shape: FEATURE_SHAPE,
            frozen,
        })
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        let s = self.net.input_shape();
        [s[0], s[1], s[2]]
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params_mut(&mut self) -> Result<&mut [Tensor]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(self.net.params_mut())
    }

    pub fn digest(&self) -> Digest {
        digest_tensors(self.net.params())
    }

    /// Records the backbone on `tape`; returns `[n, C, h, w]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, crate::diff::Bound)> {
        let bound = self.net.bind(tape, trainable && !self.frozen);
        let flat = self.net.forward(tape, &bound, x)?;
        let n = tape.shape(flat)[0];
        let [c, h, w] = self.feature_shape;
        Ok((tape.reshape(flat, &[n, c, h, w])?, bound))
    }

    /// Feature maps without gradient tracking.
    pub fn features(&self, obs: &Tensor) -> Result<Tensor> {
        let n = obs.shape()[0];
        let [c, h, w] = self.feature_shape;
        self.net.infer(obs)?.reshape(&[n, c, h, w])
    }

    /// Globally mean-pooled features, `[n, C]`.
    pub fn pooled(&self, obs: &Tensor) -> Result<Tensor> {
        let n = obs.shape()[0];
        let [c, h, w] = self.feature_shape;
        let f = self.net.infer(obs)?;
        let m = h * w;
        let data: Vec<f64> = f
            .data()
            .chunks_exact(m)
            .map(|ch| ch.iter().sum::<f64>() / m as f64)
            .collect();
        Tensor::new(vec![n, c], data)
    }
}

impl Embedder for Backbone {
    fn embed(&self, obs: &Tensor) -> Result<Tensor> {
        self.pooled(obs)
    }

    fn kind(&self) -> &'static str {
        "backbone"
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub k_near: usize,
    pub k_far: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub num_envs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            k_near: 1,
            k_far: 20,
            margin: 1.0,
            batch_size: 32,
            lr: 1e-3,
            num_envs: 8,
        }
    }
}

/// Newest frames of one episode in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFrames {
    pub env_index: usize,
    pub frames: Vec<Vec<f64>>,
}

/// Random-policy trajectories, stored as single frames per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStore {
    frame_size: usize,
    stack: usize,
    episodes: Vec<EpisodeFrames>,
}

impl RolloutStore {
    pub fn new(frame_size: usize, stack: usize, episodes: Vec<EpisodeFrames>) -> Result<Self> {
        if episodes
            .iter()
            .flat_map(|e| e.frames.iter())
            .any(|f| f.len() != frame_size * frame_size)
        {
            return Err(Error::Invalid("frame size mismatch in rollout store".into()));
        }
        Ok(RolloutStore {
            frame_size,
            stack,
            episodes,
        })
    }

    pub fn episodes(&self) -> &[EpisodeFrames] {
        &self.episodes
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn stack(&self) -> usize {
        self.stack
    }

    /// Stacked observation at step `i` of an episode, padding the start by
    /// repeating the first frame as a reset does.
    pub fn observation(&self, episode: usize, i: usize) -> Observation {
        let frames = &self.episodes[episode].frames;
        let s = self.stack;
        Observation::from_frames(
            self.frame_size,
            (0..s).map(|k| frames[(i + k + 1).saturating_sub(s)].as_slice()),
        )
        .expect("store frames are validated")
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.u64(self.frame_size as u64).u64(self.stack as u64);
        for e in &self.episodes {
            h.u64(e.env_index as u64).u64(e.frames.len() as u64);
            for f in &e.frames {
                h.f64s(f);
            }
        }
        h.finish()
    }

    fn batch(&self, idx: &[(usize, usize)]) -> Result<Tensor> {
        let obs: Vec<Observation> = idx.iter().map(|&(e, i)| self.observation(e, i)).collect();
        crate::env::batch_observations(obs.iter())
    }
}

/// Runs a uniform-random policy for `n_steps` on each of `num_envs`
/// environments and records every observed frame.
pub fn collect_pretrain_rollouts(
    env: &EnvConfig,
    num_envs: usize,
    n_steps: usize,
    seed: u64,
    cfg: &PretrainConfig,
) -> Result<RolloutStore> {
    if n_steps < 10 * cfg.k_far {
        return Err(Error::Config(alloc::format!(
            "pretraining needs at least {} steps per env, got {n_steps}",
            10 * cfg.k_far
        )));
    }
    if num_envs == 0 {
        return Err(Error::Config("need at least one environment".into()));
    }
    let base = derive_seed(seed, stream::PRETRAIN);
    let mut episodes = Vec::new();
    for e in 0..num_envs {
        let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(base, 2 * e as u64));
        let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(base, 2 * e as u64 + 1));
        let mut grid = GridEnv::new(env.clone())?;
        let mut obs = grid.reset(env_rng.next_u64());
        let mut frames = Vec::new();
        for _ in 0..n_steps {
            frames.push(obs.newest().to_vec());
            let action = Action::from_index(act_rng.random_range(0..Action::COUNT))?;
            let result = grid.step(action)?;
            obs = if result.done {
                episodes.push(EpisodeFrames {
                    env_index: e,
                    frames: core::mem::take(&mut frames),
                });
                grid.reset(env_rng.next_u64())
            } else {
                result.obs
            };
        }
        if !frames.is_empty() {
            episodes.push(EpisodeFrames { env_index: e, frames });
        }
    }
    RolloutStore::new(env.frame_size, env.stack, episodes)
}

/// Anchors with positives `k_near` ahead and negatives at least `k_far`
/// away, drawn from the same episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPairBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
}

fn valid_anchors(store: &RolloutStore, cfg: &PretrainConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in store.episodes.iter().enumerate() {
        let len = ep.frames.len();
        if len <= cfg.k_far {
            continue;
        }
        for i in 0..len - cfg.k_near {
            out.push((e, i));
        }
    }
    out
}

pub fn sample_triplets(
    store: &RolloutStore,
    cfg: &PretrainConfig,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<TemporalPairBatch> {
    if batch < 2 {
        return Err(Error::Config("triplet batches need at least 2 anchors".into()));
    }
    let anchors = valid_anchors(store, cfg);
    if anchors.is_empty() {
        return Err(Error::Undefined("triplets: no episode spans k_far steps"));
    }
    let mut a = Vec::with_capacity(batch);
    let mut p = Vec::with_capacity(batch);
    let mut n = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (e, i) = anchors[rng.random_range(0..anchors.len())];
        let len = store.episodes[e].frames.len();
        let far: Vec<usize> = (0..len).filter(|&j| j.abs_diff(i) >= cfg.k_far).collect();
        let j = if far.is_empty() {
            // i sits in the middle of a short episode; the farthest end works
            if i >= len - 1 - i { 0 } else { len - 1 }
        } else {
            far[rng.random_range(0..far.len())]
        };
        a.push((e, i));
        p.push((e, i + cfg.k_near));
        n.push((e, j));
    }
    Ok(TemporalPairBatch {
        anchors: store.batch(&a)?,
        positives: store.batch(&p)?,
        negatives: store.batch(&n)?,
    })
}

/// Triplet margin loss on globally pooled features; returns the loss var.
fn triplet_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    batch: &TemporalPairBatch,
    margin: f64,
) -> Result<(Var, crate::diff::Bound)> {
    let b = batch.anchors.shape()[0];
    let all = Tensor::stack(&[&batch.anchors, &batch.positives, &batch.negatives])?;
    let s = all.shape().to_vec();
    let all = all.reshape(&[3 * b, s[2], s[3], s[4]])?;
    let x = tape.leaf(&all);
    let (feat, bound) = backbone.forward(tape, x, true)?;
    let [c, h, w] = backbone.feature_shape();
    let pooled = tape.mean_pool(feat, h.min(w))?;
    let pooled = tape.reshape(pooled, &[3 * b, c])?;
    // split the stacked embeddings back into the three roles with one-hot
    // row selections on a [3, b*c] view
    let view = tape.reshape(pooled, &[3, b * c])?;
    let rows = |tape: &mut Tape, k: usize| -> Result<Var> {
        let mut sel = vec![0.0; 3];
        sel[k] = 1.0;
        let sel = tape.constant(&[1, 3], sel)?;
        let r = tape.matmul(sel, view)?;
        tape.reshape(r, &[b, c])
    };
    let ea = rows(tape, 0)?;
    let ep = rows(tape, 1)?;
    let en = rows(tape, 2)?;
    let dist = |tape: &mut Tape, x: Var, y: Var| -> Result<Var> {
        let d = tape.sub(x, y)?;
        let sq = tape.square(d)?;
        let s = tape.sum_rows(sq)?;
        let s = tape.add_scalar(s, 1e-12)?;
        tape.sqrt(s)
    };
    let d_ap = dist(tape, ea, ep)?;
    let d_an = dist(tape, ea, en)?;
    let gap = tape.sub(d_ap, d_an)?;
    let gap = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(gap)?;
    Ok((tape.mean(hinge)?, bound))
}

/// Trains a fresh backbone on `store` and freezes it. Returns the backbone
/// and the mean triplet loss of each epoch.
pub fn pretrain_backbone(
    store: &RolloutStore,
    epochs: usize,
    seed: u64,
    cfg: &PretrainConfig,
) -> Result<(Backbone, Vec<f64>)> {
    if store.frame_count() == 0 {
        return Err(Error::Invalid("empty rollout store".into()));
    }
    let obs_shape = [store.stack, store.frame_size, store.frame_size];
    let mut backbone = Backbone::new(obs_shape, derive_seed(seed, 1))?;
    let mut opt = AdamState::new(cfg.lr, backbone.network().params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let batches = (valid_anchors(store, cfg).len() / cfg.batch_size).max(1);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for _ in 0..batches {
            let batch = sample_triplets(store, cfg, cfg.batch_size, &mut rng)?;
            let mut tape = Tape::new();
            let (loss, bound) = triplet_loss(&mut tape, &backbone, &batch, cfg.margin)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "triplet_loss" });
            }
            total += value;
            let grads = tape.backward(loss)?;
            backbone.net.store_grads(&bound, &grads)?;
            adam_step(&mut opt, backbone.params_mut()?)?;
        }
        losses.push(total / batches as f64);
    }
    backbone.freeze();
    Ok((backbone, losses))
}

/// Mean distance of `k_near` pairs over mean distance of `k_far` pairs,
/// using every anchor that has both partners in its episode.
pub fn temporal_coherence_ratio(
    embed: &dyn Embedder,
    store: &RolloutStore,
    cfg: &PretrainConfig,
) -> Result<f64> {
    let mut triples = Vec::new();
    for (e, ep) in store.episodes.iter().enumerate() {
        let len = ep.frames.len();
        for i in 0..len.saturating_sub(cfg.k_far) {
            triples.push((e, i));
        }
    }
    if triples.is_empty() {
        return Err(Error::Undefined("coherence ratio: no pairs at k_near and k_far"));
    }
    let (mut near, mut far) = (0.0, 0.0);
    for chunk in triples.chunks(128) {
        let a: Vec<_> = chunk.to_vec();
        let p: Vec<_> = chunk.iter().map(|&(e, i)| (e, i + cfg.k_near)).collect();
        let n: Vec<_> = chunk.iter().map(|&(e, i)| (e, i + cfg.k_far)).collect();
        let ea = embed_chunked(embed, &store.batch(&a)?, 128)?;
        let ep = embed_chunked(embed, &store.batch(&p)?, 128)?;
        let en = embed_chunked(embed, &store.batch(&n)?, 128)?;
        for r in 0..chunk.len() {
            near += row_distance(&ea, r, &ep, r);
            far += row_distance(&ea, r, &en, r);
        }
    }
    let count = triples.len() as f64;
    let (near, far) = (near / count, far / count);
    if far == 0.0 {
        return Err(Error::Undefined("coherence ratio: far-pair distance is zero"));
    }
    Ok(near / far)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_steps_is_an_error() {
        let cfg = PretrainConfig::default();
        assert!(collect_pretrain_rollouts(&EnvConfig::grid_explore(), 2, 0, 1, &cfg).is_err());
        assert!(collect_pretrain_rollouts(&EnvConfig::grid_explore(), 2, 199, 1, &cfg).is_err());
    }

    #[test]
    fn store_counts_and_is_deterministic() {
        let cfg = PretrainConfig::default();
        let env = EnvConfig::grid_explore();
        let a = collect_pretrain_rollouts(&env, 3, 200, 7, &cfg).unwrap();
        let b = collect_pretrain_rollouts(&env, 3, 200, 7, &cfg).unwrap();
        assert_eq!(a.frame_count(), 600);
        assert_eq!(a.digest(), b.digest());
        let c = collect_pretrain_rollouts(&env, 3, 200, 8, &cfg).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn store_observation_pads_with_first_frame() {
        let frames = vec![vec![0.1; 4], vec![0.2; 4], vec![0.3; 4]];
        let store = RolloutStore::new(2, 3, vec![EpisodeFrames { env_index: 0, frames }]).unwrap();
        let o = store.observation(0, 1);
        assert_eq!(o.frame(0), &[0.1; 4]);
        assert_eq!(o.frame(1), &[0.1; 4]);
        assert_eq!(o.frame(2), &[0.2; 4]);
    }

    #[test]
    fn frozen_backbone_rejects_updates() {
        let mut b = Backbone::new([4, 36, 36], 0).unwrap();
        assert!(b.params_mut().is_ok());
        b.freeze();
        assert_eq!(b.params_mut().unwrap_err(), Error::Frozen);
    }

    #[test]
    fn backbone_output_shape() {
        let b = Backbone::new([4, 36, 36], 0).unwrap();
        let obs = Tensor::zeros(&[2, 4, 36, 36]);
        assert_eq!(b.features(&obs).unwrap().shape(), &[2, 64, 4, 4]);
        assert_eq!(b.pooled(&obs).unwrap().shape(), &[2, 64]);
    }

    struct Constant;
    impl Embedder for Constant {
        fn embed(&self, obs: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(&[obs.shape()[0], 3]))
        }
        fn kind(&self) -> &'static str {
            "constant"
        }
    }

    #[test]
    fn constant_embedding_has_undefined_ratio() {
        let cfg = PretrainConfig::default();
        let store = collect_pretrain_rollouts(&EnvConfig::grid_explore(), 1, 200, 3, &cfg).unwrap();
        assert!(matches!(
            temporal_coherence_ratio(&Constant, &store, &cfg),
            Err(Error::Undefined(_))
        ));
    }
}
