//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use curio_core::agent::PpoConfig;
use curio_core::digest::{Digest, Hasher};
use curio_core::env::{EnvConfig, EnvKind};
use curio_core::intrinsic::CuriosityConfig;
use curio_core::trainer::{Algo, TrainConfig};

use crate::error::{LabError, Result};

/// Output root used when neither `--out` nor a config `out` key is given.
pub const DEFAULT_OUT: &str = "runs";
/// Environment variable that overrides the output root.
pub const OUT_ENV: &str = "CURIO_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algo: Algo,
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub ppo: PpoConfig,
    pub curiosity: CuriosityConfig,
    pub probe_size: usize,
    pub snapshot_fraction: f64,
    /// Pre-trained backbone checkpoint; required for prend, optional
    /// (diagnostics only) otherwise.
    pub backbone: Option<PathBuf>,
    pub out: PathBuf,
    /// Step environments on worker threads.
    pub threaded: bool,
}

impl RunConfig {
    pub fn new(kind: EnvKind) -> Self {
        let base = TrainConfig::new(EnvConfig::for_kind(kind), Algo::None, 0, 100_000);
        RunConfig {
            env: base.env,
            algo: base.algo,
            seeds: vec![0, 1],
            total_steps: base.total_steps,
            num_envs: base.num_envs,
            rollout_steps: base.rollout_steps,
            ppo: base.ppo,
            curiosity: base.curiosity,
            probe_size: base.probe_size,
            snapshot_fraction: base.snapshot_fraction,
            backbone: None,
            out: PathBuf::from(DEFAULT_OUT),
            threaded: true,
        }
    }

    /// Parses config text on top of the defaults for its `env` key (or
    /// `grid_explore` when absent).
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let kind = match pairs.iter().rev().find(|(k, _)| k == "env") {
            Some((_, v)) => EnvKind::from_name(v)?,
            None => EnvKind::GridExplore,
        };
        let mut cfg = RunConfig::new(kind);
        for (k, v) in &pairs {
            if k != "env" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        Self::parse(&text)
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env" => {
                let kind = EnvKind::from_name(v)?;
                if kind != self.env.kind {
                    self.env = EnvConfig {
                        distractors: self.env.distractors,
                        ..EnvConfig::for_kind(kind)
                    };
                }
            }
            "grid_size" => self.env.grid_size = num(key, v)?,
            "horizon" => self.env.horizon = num(key, v)?,
            "distractors" => self.env.distractors = flag(key, v)?,
            "frame_size" => self.env.frame_size = num(key, v)?,
            "stack" => self.env.stack = num(key, v)?,
            "layout_seed" => {
                self.env.layout_seed = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "algo" => self.algo = Algo::from_name(v)?,
            "seed" => self.seeds = vec![num(key, v)?],
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "steps" => self.total_steps = num(key, v)?,
            "num_envs" => self.num_envs = num(key, v)?,
            "rollout_steps" => self.rollout_steps = num(key, v)?,
            "gamma" => self.ppo.gamma = num(key, v)?,
            "lambda" => self.ppo.lambda = num(key, v)?,
            "clip" => self.ppo.clip = num(key, v)?,
            "epochs" => self.ppo.epochs = num(key, v)?,
            "minibatches" => self.ppo.minibatches = num(key, v)?,
            "entropy_coef" => self.ppo.entropy_coef = num(key, v)?,
            "value_coef" => self.ppo.value_coef = num(key, v)?,
            "lr" | "base_lr" => {
                self.ppo.lr = num(key, v)?;
                self.curiosity.base_lr = self.ppo.lr;
            }
            "adam_eps" => self.ppo.adam_eps = num(key, v)?,
            "max_grad_norm" => self.ppo.max_grad_norm = num(key, v)?,
            "beta" => self.ppo.beta = num(key, v)?,
            "lr_mult" | "lr_multiplier" => self.curiosity.lr_multiplier = Some(num(key, v)?),
            "embedding_dim" => self.curiosity.embedding_dim = num(key, v)?,
            "obs_clip" => self.curiosity.obs_clip = num(key, v)?,
            "intrinsic_gamma" => self.curiosity.gamma = num(key, v)?,
            "non_episodic" => self.curiosity.non_episodic = flag(key, v)?,
            "predictor_epochs" => self.curiosity.epochs = num(key, v)?,
            "predictor_minibatches" => self.curiosity.minibatches = num(key, v)?,
            "update_proportion" => self.curiosity.update_proportion = num(key, v)?,
            "probe_size" => self.probe_size = num(key, v)?,
            "snapshot_fraction" => self.snapshot_fraction = num(key, v)?,
            "backbone" => self.backbone = (v != "none").then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "threaded" => self.threaded = flag(key, v)?,
            other => return Err(LabError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            env: self.env.clone(),
            algo: self.algo,
            seed,
            total_steps: self.total_steps,
            num_envs: self.num_envs,
            rollout_steps: self.rollout_steps,
            ppo: self.ppo,
            curiosity: self.curiosity,
            probe_size: self.probe_size,
            snapshot_fraction: self.snapshot_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(LabError::Config("seeds must be distinct".into()));
        }
        self.train_config(self.seeds[0]).validate()?;
        if self.algo == Algo::Curious(curio_core::intrinsic::Variant::PreNd) && self.backbone.is_none() {
            return Err(LabError::Config("prend needs `backbone = PATH`".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("env", self.env.kind.name().into());
        put("grid_size", self.env.grid_size.to_string());
        put("horizon", self.env.horizon.to_string());
        put("distractors", self.env.distractors.to_string());
        put("frame_size", self.env.frame_size.to_string());
        put("stack", self.env.stack.to_string());
        put(
            "layout_seed",
            self.env.layout_seed.map_or("none".into(), |s| s.to_string()),
        );
        put("algo", self.algo.name().into());
        put(
            "seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        put("steps", self.total_steps.to_string());
        put("num_envs", self.num_envs.to_string());
        put("rollout_steps", self.rollout_steps.to_string());
        put("gamma", fmt_f64(self.ppo.gamma));
        put("lambda", fmt_f64(self.ppo.lambda));
        put("clip", fmt_f64(self.ppo.clip));
        put("epochs", self.ppo.epochs.to_string());
        put("minibatches", self.ppo.minibatches.to_string());
        put("entropy_coef", fmt_f64(self.ppo.entropy_coef));
        put("value_coef", fmt_f64(self.ppo.value_coef));
        put("lr", fmt_f64(self.ppo.lr));
        put("adam_eps", fmt_f64(self.ppo.adam_eps));
        put("max_grad_norm", fmt_f64(self.ppo.max_grad_norm));
        put("beta", fmt_f64(self.ppo.beta));
        if let Some(m) = self.curiosity.lr_multiplier {
            put("lr_mult", fmt_f64(m));
        }
        put("embedding_dim", self.curiosity.embedding_dim.to_string());
        put("obs_clip", fmt_f64(self.curiosity.obs_clip));
        put("intrinsic_gamma", fmt_f64(self.curiosity.gamma));
        put("non_episodic", self.curiosity.non_episodic.to_string());
        put("predictor_epochs", self.curiosity.epochs.to_string());
        put("predictor_minibatches", self.curiosity.minibatches.to_string());
        put("update_proportion", fmt_f64(self.curiosity.update_proportion));
        put("probe_size", self.probe_size.to_string());
        put("snapshot_fraction", fmt_f64(self.snapshot_fraction));
        put(
            "backbone",
            self.backbone
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        );
        put("out", self.out.display().to_string());
        put("threaded", self.threaded.to_string());
        s
    }

    /// Digest of everything that affects training output. The output
    /// directory and threading mode are excluded.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        for line in self.to_text().lines() {
            if line.starts_with("out =") || line.starts_with("threaded =") {
                continue;
            }
            h.bytes(line.as_bytes()).bytes(b"\n");
        }
        h.finish()
    }
}

fn fmt_f64(v: f64) -> String {
    // Debug formatting is the shortest string that round-trips
    format!("{v:?}")
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(LabError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LabError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(LabError::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}
