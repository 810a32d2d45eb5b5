//! Experiment orchestration: per-seed training runs with their artifacts,
//! and the cross-algorithm comparison.
//!
//! Layout of one experiment directory:
//!
//! ```text
//! <out>/<env>_<algo>_<digest prefix>/
//!   manifest.json   written before training, never rewritten
//!   config.txt      canonical config text
//!   timing.json     wall-clock stats, written at the end
//!   seed_<s>/metrics.csv, corr.csv, pairwise_<step>.csv, final.ckpt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use curio_core::pretrain::Backbone;
use curio_core::seed::{derive_seed, stream};
use curio_core::trainer::{Algo, MetricRow, Snapshot, TrainEvent, Trainer};

use crate::checkpoint;
use crate::config::{RunConfig, OUT_ENV};
use crate::csvio::{self, TableWriter, COMPARISON_COLUMNS, CORR_FILE, METRICS_FILE};
use crate::error::{LabError, Result};
use crate::vecenv::ThreadedVecEnv;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const TIMING_FILE: &str = "timing.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutputs {
    pub seed: u64,
    /// Paths are relative to the experiment directory.
    pub metrics: String,
    pub corr: Option<String>,
    pub pairwise: Vec<String>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub code_version: String,
    pub env: String,
    pub algo: String,
    pub total_steps: usize,
    pub backbone_digest: Option<String>,
    pub config: String,
    pub seeds: Vec<SeedOutputs>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(LabError::io(&p))?;
        serde_json::from_str(&text).map_err(LabError::json(&p))
    }

    /// Every file the manifest names.
    pub fn files(&self) -> Vec<&str> {
        let mut out = vec![self.config.as_str()];
        for s in &self.seeds {
            out.push(&s.metrics);
            out.extend(s.corr.as_deref());
            out.extend(s.pairwise.iter().map(String::as_str));
            out.push(&s.checkpoint);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub seconds: f64,
    pub steps_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub seeds: Vec<SeedTiming>,
}

/// Output root: `$CURIO_OUT` when set, otherwise the config's `out`.
pub fn out_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out.clone())
}

pub fn experiment_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    let digest = cfg.digest().to_string();
    root.join(format!("{}_{}_{}", cfg.env.kind.name(), cfg.algo.name(), &digest[..12]))
}

fn seed_outputs(cfg: &RunConfig, seed: u64) -> SeedOutputs {
    let dir = format!("seed_{seed}");
    let curious = cfg.algo != Algo::None;
    let tc = cfg.train_config(seed);
    SeedOutputs {
        seed,
        metrics: format!("{dir}/{METRICS_FILE}"),
        corr: curious.then(|| format!("{dir}/{CORR_FILE}")),
        pairwise: if curious {
            tc.snapshot_steps()
                .into_iter()
                .map(|s| format!("{dir}/{}", csvio::pairwise_file(s)))
                .collect()
        } else {
            Vec::new()
        },
        checkpoint: format!("{dir}/{FINAL_CHECKPOINT}"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(LabError::json(path))?;
    fs::write(path, text + "\n").map_err(LabError::io(path))
}

enum Record {
    Metric(MetricRow),
    Snapshot(Snapshot),
}

/// Writes rows in arrival order on its own thread.
struct ArtifactWriter {
    tx: Option<Sender<Record>>,
    handle: Option<std::thread::JoinHandle<Result<()>>>,
}

impl ArtifactWriter {
    fn spawn(dir: PathBuf, curious: bool) -> Result<Self> {
        let mut metrics = csvio::metrics_writer(&dir.join(METRICS_FILE))?;
        let mut corr = if curious {
            Some(csvio::corr_writer(&dir.join(CORR_FILE))?)
        } else {
            None
        };
        let (tx, rx) = channel::<Record>();
        let handle = std::thread::Builder::new()
            .name("metrics-writer".into())
            .spawn(move || -> Result<()> {
                for rec in rx {
                    match rec {
                        Record::Metric(row) => metrics.row(csvio::metric_fields(&row))?,
                        Record::Snapshot(s) => {
                            if let Some(c) = corr.as_mut() {
                                for r in csvio::corr_rows(&s) {
                                    c.row(r)?;
                                }
                            }
                            csvio::write_pairwise(&dir.join(csvio::pairwise_file(s.step)), &s.reward_diff)?;
                        }
                    }
                }
                metrics.finish()?;
                if let Some(c) = corr {
                    c.finish()?;
                }
                Ok(())
            })
            .map_err(|e| LabError::Worker(e.to_string()))?;
        Ok(ArtifactWriter {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    fn send(&self, rec: Record) -> Result<()> {
        self.tx
            .as_ref()
            .and_then(|tx| tx.send(rec).ok())
            .ok_or_else(|| LabError::Worker("metrics writer stopped".into()))
    }

    /// Drains pending rows and reports the writer's result.
    fn finish(mut self) -> Result<()> {
        self.tx.take();
        match self.handle.take().map(|h| h.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(LabError::Worker("metrics writer panicked".into())),
            None => Ok(()),
        }
    }
}

impl Drop for ArtifactWriter {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Trains one seed, writing its artifacts under `dir`.
pub fn run_seed(cfg: &RunConfig, seed: u64, backbone: Option<Arc<Backbone>>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let tc = cfg.train_config(seed);
    let env_seed = derive_seed(seed, stream::ENVS);
    let mut trainer = if cfg.threaded {
        let envs = ThreadedVecEnv::new(&tc.env, tc.num_envs, env_seed)?;
        Trainer::with_envs(tc, Box::new(envs), backbone)?
    } else {
        Trainer::new(tc, backbone)?
    };
    let writer = ArtifactWriter::spawn(dir.to_path_buf(), cfg.algo != Algo::None)?;
    let outcome = trainer.run(|event| {
        let rec = match event {
            TrainEvent::Metric(r) => Record::Metric(*r),
            TrainEvent::Snapshot(s) => Record::Snapshot(s.clone()),
        };
        writer.send(rec).map_err(|e| curio_core::Error::Invalid(e.to_string()))
    });
    // flush whatever was produced, even when training failed
    let flushed = writer.finish();
    outcome?;
    flushed?;

    let mut parts: Vec<(&str, &curio_core::diff::Sequential)> = trainer.policy().parts().to_vec();
    if let Some(m) = trainer.curiosity() {
        parts.push(("target", m.target()));
        parts.push(("predictor", m.predictor()));
    }
    checkpoint::save(&dir.join(FINAL_CHECKPOINT), &checkpoint::named(&parts))
}

/// Runs every seed of `cfg` under `root`. The manifest is written before
/// any training starts; a missing or unusable backbone fails first.
pub fn run_experiment(cfg: &RunConfig, root: &Path) -> Result<(PathBuf, Manifest)> {
    cfg.validate()?;
    let backbone = match &cfg.backbone {
        Some(p) => Some(checkpoint::load_backbone(p)?.0),
        None => None,
    };
    if let Some(b) = &backbone {
        if b.obs_shape() != cfg.env.obs_shape() {
            return Err(LabError::Config(format!(
                "backbone expects observations {:?}, env produces {:?}",
                b.obs_shape(),
                cfg.env.obs_shape()
            )));
        }
    }
    let dir = experiment_dir(root, cfg);
    fs::create_dir_all(&dir).map_err(LabError::io(&dir))?;
    let manifest = Manifest {
        config_digest: cfg.digest().to_string(),
        code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        env: cfg.env.kind.name().into(),
        algo: cfg.algo.name().into(),
        total_steps: cfg.total_steps,
        backbone_digest: backbone.as_ref().map(|b| b.digest().to_string()),
        config: CONFIG_FILE.into(),
        seeds: cfg.seeds.iter().map(|&s| seed_outputs(cfg, s)).collect(),
    };
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(LabError::io(&cfg_path))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let start = Instant::now();
    let mut timings = Vec::new();
    for &seed in &cfg.seeds {
        let t = Instant::now();
        run_seed(cfg, seed, backbone.clone(), &dir.join(format!("seed_{seed}")))?;
        let secs = t.elapsed().as_secs_f64();
        timings.push(SeedTiming {
            seed,
            seconds: secs,
            steps_per_second: cfg.train_config(seed).total_steps as f64 / secs.max(1e-9),
        });
    }
    if let (Some(b), Some(d)) = (&backbone, &manifest.backbone_digest) {
        if b.digest().to_string() != *d {
            return Err(LabError::Worker("backbone changed during training".into()));
        }
    }
    write_json(
        &dir.join(TIMING_FILE),
        &Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            seeds: timings,
        },
    )?;
    Ok((dir, manifest))
}

/// One row of the comparison CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub step: usize,
    pub algo: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-algorithm episode-return curves aggregated over seeds on the step
/// grid shared by all of them.
pub fn compare(experiments: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    let mut loaded = Vec::new();
    for dir in experiments {
        loaded.push((dir, Manifest::load(dir)?));
    }
    let Some((_, first)) = loaded.first() else {
        return Err(LabError::Config("compare needs at least one experiment".into()));
    };
    let (env, steps) = (first.env.clone(), first.total_steps);
    let mut by_algo: BTreeMap<String, Vec<Vec<MetricRow>>> = BTreeMap::new();
    for (dir, m) in &loaded {
        if m.env != env || m.total_steps != steps {
            return Err(LabError::Config(format!(
                "{}: experiment is {} for {} steps, expected {env} for {steps}",
                dir.display(),
                m.env,
                m.total_steps
            )));
        }
        let runs = by_algo.entry(m.algo.clone()).or_default();
        if !runs.is_empty() {
            return Err(LabError::Config(format!("algo `{}` appears twice", m.algo)));
        }
        for s in &m.seeds {
            runs.push(csvio::read_metrics(&dir.join(&s.metrics))?);
        }
    }
    let grid: Vec<usize> = {
        let mut sets = by_algo.values().flatten().map(|rows| rows.iter().map(|r| r.step).collect::<Vec<_>>());
        let mut common = sets.next().unwrap_or_default();
        for s in sets {
            common.retain(|x| s.contains(x));
        }
        common
    };
    let mut out = Vec::new();
    for step in grid {
        for (algo, runs) in &by_algo {
            let vals: Vec<f64> = runs
                .iter()
                .filter_map(|rows| rows.iter().find(|r| r.step == step))
                .map(|r| r.episode_return_mean)
                .collect();
            out.push(ComparisonRow {
                step,
                algo: algo.clone(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    Ok(out)
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = TableWriter::create(path, &COMPARISON_COLUMNS)?;
    for r in rows {
        w.row([
            r.step.to_string(),
            r.algo.clone(),
            csvio::fmt_float(r.mean),
            csvio::fmt_float(r.min),
            csvio::fmt_float(r.max),
        ])?;
    }
    w.finish()
}
