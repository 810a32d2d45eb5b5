//! Prediction-error curiosity: RND, RND with a slowed predictor, and PreND.
//!
//! Every variant pairs a frozen target with a learnable predictor and pays
//! the squared disagreement between the two as intrinsic reward. PreND
//! puts both on top of a shared frozen pre-trained backbone, with only the
//! necks differing.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diff::{adam_step, AdamState, LayerSpec, Sequential, Tape, Tensor};
use crate::digest::{digest_tensors, Digest};
use crate::error::{Error, Result};
use crate::nets::{conv_stack, flat_features, neck, relu_gains, HIDDEN, SMALL_CHANNELS};
use crate::pretrain::Backbone;
use crate::stats::{DiscountedReturn, RunningMeanStd};

/// Rows per forward pass when scoring large batches.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Rnd,
    RndLr,
    PreNd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Rnd, Variant::RndLr, Variant::PreNd];

    pub fn from_name(name: &str) -> Result<Variant> {
        match name {
            "rnd" => Ok(Variant::Rnd),
            "rnd-lr" | "rnd_lr" => Ok(Variant::RndLr),
            "prend" => Ok(Variant::PreNd),
            other => Err(Error::Config(format!("unknown curiosity variant `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rnd => "rnd",
            Variant::RndLr => "rnd-lr",
            Variant::PreNd => "prend",
        }
    }

    pub fn default_lr_multiplier(self) -> f64 {
        match self {
            Variant::Rnd => 1.0,
            Variant::RndLr | Variant::PreNd => 0.01,
        }
    }

    pub fn uses_backbone(self) -> bool {
        self == Variant::PreNd
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuriosityConfig {
    pub embedding_dim: usize,
    pub base_lr: f64,
    /// Overrides the variant's default multiplier when set.
    pub lr_multiplier: Option<f64>,
    pub obs_clip: f64,
    /// Discount of the intrinsic return used for reward normalization.
    pub gamma: f64,
    /// Episode ends do not cut the intrinsic return when set.
    pub non_episodic: bool,
    /// Passes over each rollout per update; matches the PPO epoch count.
    pub epochs: usize,
    pub minibatches: usize,
    /// Fraction of each rollout used for predictor training per epoch.
    pub update_proportion: f64,
}

impl Default for CuriosityConfig {
    fn default() -> Self {
        CuriosityConfig {
            embedding_dim: 64,
            base_lr: 2.5e-4,
            lr_multiplier: None,
            obs_clip: 5.0,
            gamma: 0.99,
            non_episodic: true,
            epochs: 4,
            minibatches: 4,
            update_proportion: 1.0,
        }
    }
}

impl CuriosityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || self.lr_multiplier.is_some_and(|m| !(m >= 0.0)) {
            return Err(Error::Config("curiosity learning rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("curiosity gamma must lie in [0, 1]".into()));
        }
        if self.minibatches == 0 || !(self.update_proportion > 0.0 && self.update_proportion <= 1.0) {
            return Err(Error::Config(
                "predictor minibatches must be positive and update_proportion in (0, 1]".into(),
            ));
        }
        if !(self.obs_clip > 0.0) {
            return Err(Error::Config("obs_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Target/predictor layout for the RND family.
pub fn rnd_specs(obs_shape: [usize; 3], embedding_dim: usize) -> Result<Vec<LayerSpec>> {
    let mut specs = conv_stack(obs_shape[0], SMALL_CHANNELS);
    let flat = flat_features(&obs_shape, &specs)?;
    specs.extend([
        LayerSpec::Dense {
            inputs: flat,
            outputs: HIDDEN,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: HIDDEN,
            outputs: embedding_dim,
        },
    ]);
    Ok(specs)
}

/// Window of the spatial pool in front of the PreND necks.
pub const NECK_POOL_WINDOW: usize = 2;

/// Per-row mean over the embedding of `(target - predictor)^2`.
pub fn prediction_error(target: &Tensor, predictor: &Tensor) -> Result<Vec<f64>> {
    if target.shape() != predictor.shape() || target.shape().len() != 2 {
        return Err(Error::shape("prediction_error", target.shape(), predictor.shape()));
    }
    let d = target.shape()[1];
    Ok(target
        .data()
        .chunks_exact(d)
        .zip(predictor.data().chunks_exact(d))
        .map(|(t, p)| t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64)
        .collect())
}

#[derive(Debug, Clone)]
pub struct CuriosityModule {
    variant: Variant,
    config: CuriosityConfig,
    obs_shape: [usize; 3],
    backbone: Option<Arc<Backbone>>,
    target: Sequential,
    predictor: Sequential,
    optimizer: AdamState,
    obs_rms: RunningMeanStd,
    ret_rms: RunningMeanStd,
    returns: Option<DiscountedReturn>,
}

impl CuriosityModule {
    /// Builds a module. Target and predictor are initialized from
    /// `seed + 1` and `seed + 2`; PreND requires a frozen backbone and the
    /// RND family refuses one.
    pub fn build(
        variant: Variant,
        seed: u64,
        obs_shape: [usize; 3],
        backbone: Option<Arc<Backbone>>,
        config: CuriosityConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (specs, input): (Vec<LayerSpec>, Vec<usize>) = match (variant, &backbone) {
            (Variant::PreNd, None) => {
                return Err(Error::Config("prend needs a pre-trained backbone".into()));
            }
            (Variant::PreNd, Some(b)) => {
                if !b.is_frozen() {
                    return Err(Error::Config("prend needs a frozen backbone".into()));
                }
                if b.obs_shape() != obs_shape {
                    return Err(Error::shape("prend backbone", &obs_shape, &b.obs_shape()));
                }
                let fs = b.feature_shape();
                (neck(fs, NECK_POOL_WINDOW, config.embedding_dim), fs.to_vec())
            }
            (_, Some(_)) => {
                return Err(Error::Config(format!(
                    "{} does not take a backbone",
                    variant.name()
                )));
            }
            (_, None) => (rnd_specs(obs_shape, config.embedding_dim)?, obs_shape.to_vec()),
        };
        let gains = relu_gains(&specs);
        let target = Sequential::new(&input, &specs, &gains, seed.wrapping_add(1))?;
        let predictor = Sequential::new(&input, &specs, &gains, seed.wrapping_add(2))?;
        let lr = config.base_lr * config.lr_multiplier.unwrap_or(variant.default_lr_multiplier());
        let optimizer = AdamState::new(lr, predictor.params());
        Ok(CuriosityModule {
            variant,
            config,
            obs_shape,
            backbone,
            target,
            predictor,
            optimizer,
            obs_rms: RunningMeanStd::new(obs_shape.iter().product()),
            ret_rms: RunningMeanStd::scalar(),
            returns: None,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &CuriosityConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr
    }

    pub fn target(&self) -> &Sequential {
        &self.target
    }

    pub fn predictor(&self) -> &Sequential {
        &self.predictor
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn backbone(&self) -> Option<&Arc<Backbone>> {
        self.backbone.as_ref()
    }

    pub fn obs_normalizer(&self) -> &RunningMeanStd {
        &self.obs_rms
    }

    pub fn return_normalizer(&self) -> &RunningMeanStd {
        &self.ret_rms
    }

    pub fn target_digest(&self) -> Digest {
        digest_tensors(self.target.params())
    }

    pub fn predictor_digest(&self) -> Digest {
        digest_tensors(self.predictor.params())
    }

    /// Replaces the predictor weights, e.g. with a copy of the target's.
    pub fn load_predictor(&mut self, params: &Sequential) -> Result<()> {
        self.predictor.copy_params_from(params)
    }

    fn check_obs(&self, obs: &Tensor) -> Result<usize> {
        let s = obs.shape();
        if s.len() != 4 || s[1..] != self.obs_shape[..] {
            let mut expected = alloc::vec![0];
            expected.extend_from_slice(&self.obs_shape);
            return Err(Error::shape("curiosity input", &expected, s));
        }
        Ok(s[0])
    }

    /// Folds an observation batch into the pixel normalizer. PreND does
    /// not normalize its input, so this is a no-op there.
    pub fn update_obs_normalizer(&mut self, obs: &Tensor) -> Result<()> {
        self.check_obs(obs)?;
        if self.variant.uses_backbone() {
            return Ok(());
        }
        self.obs_rms.update(obs.data())
    }

    /// What the target and predictor actually see: clipped normalized
    /// pixels for the RND family, frozen backbone features for PreND.
    pub fn net_inputs(&self, obs: &Tensor) -> Result<Tensor> {
        self.check_obs(obs)?;
        match &self.backbone {
            Some(b) => b.features(obs),
            None => {
                if self.obs_rms.count() == 0.0 {
                    return Err(Error::Undefined("observation normalizer has no data yet"));
                }
                let data = self.obs_rms.normalize_clipped(obs.data(), self.config.obs_clip);
                Tensor::new(obs.shape().to_vec(), data)
            }
        }
    }

    fn score_inputs(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        let n = inputs.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let x = if start == 0 && end == n {
                inputs.clone()
            } else {
                inputs.slice_rows(start, end)?
            };
            let t = self.target.infer(&x)?;
            let p = self.predictor.infer(&x)?;
            out.extend(prediction_error(&t, &p)?);
            start = end;
        }
        Ok(out)
    }

    /// Unnormalized intrinsic reward per observation.
    pub fn raw_rewards(&self, obs: &Tensor) -> Result<Vec<f64>> {
        let inputs = self.net_inputs(obs)?;
        self.score_inputs(&inputs)
    }

    /// Folds raw rewards laid out time-major (`[T][num_envs]`) into the
    /// running intrinsic return, updates the return normalizer and returns
    /// the rewards divided by its std.
    pub fn normalize_rewards(&mut self, raw: &[f64], dones: &[bool], num_envs: usize) -> Result<Vec<f64>> {
        if num_envs == 0 || raw.len() % num_envs != 0 || dones.len() != raw.len() {
            return Err(Error::shape("normalize_rewards", &[raw.len()], &[dones.len(), num_envs]));
        }
        let gamma = self.config.gamma;
        let filter = self
            .returns
            .get_or_insert_with(|| DiscountedReturn::new(num_envs, gamma));
        let mut returns = Vec::with_capacity(raw.len());
        let no_reset = alloc::vec![false; num_envs];
        for (r, d) in raw.chunks_exact(num_envs).zip(dones.chunks_exact(num_envs)) {
            let reset = if self.config.non_episodic { &no_reset[..] } else { d };
            returns.extend(filter.push(r, reset));
        }
        self.ret_rms.update_scalar(&returns)?;
        if self.ret_rms.count() > 1.0 {
            let scale = libm::sqrt(self.ret_rms.var()[0] + 1e-8);
            Ok(raw.iter().map(|r| r / scale).collect())
        } else {
            Ok(raw.to_vec())
        }
    }

    fn step_on(&mut self, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.predictor.bind(&mut tape, true);
        let x = tape.leaf(inputs);
        let y = self.predictor.forward(&mut tape, &bound, x)?;
        let t = tape.leaf(targets);
        let diff = tape.sub(y, t)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "predictor_loss" });
        }
        let grads = tape.backward(loss)?;
        self.predictor.store_grads(&bound, &grads)?;
        adam_step(&mut self.optimizer, self.predictor.params_mut())?;
        Ok(value)
    }

    /// One Adam step on the predictor's MSE to the target over the whole
    /// batch. Returns the loss before the step.
    pub fn update_predictor(&mut self, obs: &Tensor) -> Result<f64> {
        let inputs = self.net_inputs(obs)?;
        let targets = self.target.infer(&inputs)?;
        self.step_on(&inputs, &targets)
    }

    /// Predictor training over a rollout: `epochs` shuffled passes split
    /// into `minibatches` steps each. Returns the mean pre-step loss.
    pub fn train_predictor(&mut self, obs: &Tensor, rng: &mut impl Rng) -> Result<f64> {
        let n = self.check_obs(obs)?;
        if self.config.epochs == 0 || n == 0 {
            return Ok(0.0);
        }
        let inputs = self.net_inputs(obs)?;
        let mut targets = Vec::with_capacity(n * self.config.embedding_dim);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            targets.extend_from_slice(self.target.infer(&inputs.slice_rows(start, end)?)?.data());
            start = end;
        }
        let targets = Tensor::new(alloc::vec![n, self.config.embedding_dim], targets)?;
        let used = ((n as f64 * self.config.update_proportion).ceil() as usize).clamp(1, n);
        let mb = (used / self.config.minibatches).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        let (mut total, mut steps) = (0.0, 0usize);
        for _ in 0..self.config.epochs {
            order.shuffle(rng);
            for chunk in order[..used].chunks(mb) {
                let x = inputs.select_rows(chunk)?;
                let t = targets.select_rows(chunk)?;
                total += self.step_on(&x, &t)?;
                steps += 1;
            }
        }
        Ok(total / steps as f64)
    }
}
