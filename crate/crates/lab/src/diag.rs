//! Post-hoc analysis of a finished experiment directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use curio_core::diagnostics::decay_metrics;

use crate::csvio;
use crate::error::Result;
use crate::runner::Manifest;

pub const DIAG_FILE: &str = "diag.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDiag {
    pub seed: u64,
    pub updates: usize,
    pub mean_episode_return: f64,
    pub final_episode_return: f64,
    /// Decay of the raw intrinsic reward; absent for runs without
    /// curiosity or with too few updates.
    pub intrinsic_initial_mean: Option<f64>,
    pub intrinsic_final_mean: Option<f64>,
    pub intrinsic_half_life: Option<usize>,
    /// `(embed kind, mean correlation over defined snapshots)`
    pub mean_correlation: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diag {
    pub algo: String,
    pub env: String,
    pub seeds: Vec<SeedDiag>,
}

pub fn diagnose(dir: &Path) -> Result<Diag> {
    let m = Manifest::load(dir)?;
    let mut seeds = Vec::new();
    for s in &m.seeds {
        let rows = csvio::read_metrics(&dir.join(&s.metrics))?;
        let returns: Vec<f64> = rows.iter().map(|r| r.episode_return_mean).collect();
        let n = returns.len().max(1) as f64;
        let decay = (m.algo != "none")
            .then(|| decay_metrics(&rows.iter().map(|r| r.intrinsic_raw_mean).collect::<Vec<_>>()).ok())
            .flatten();
        let mut mean_correlation: Vec<(String, Option<f64>)> = Vec::new();
        if let Some(c) = &s.corr {
            let recs = csvio::read_corr(&dir.join(c))?;
            let mut kinds: Vec<String> = recs.iter().map(|r| r.embed_kind.clone()).collect();
            kinds.dedup();
            kinds.sort();
            kinds.dedup();
            for k in kinds {
                let vals: Vec<f64> = recs
                    .iter()
                    .filter(|r| r.embed_kind == k)
                    .filter_map(|r| r.correlation)
                    .collect();
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                mean_correlation.push((k, mean));
            }
        }
        seeds.push(SeedDiag {
            seed: s.seed,
            updates: rows.len(),
            mean_episode_return: returns.iter().sum::<f64>() / n,
            final_episode_return: returns.last().copied().unwrap_or(0.0),
            intrinsic_initial_mean: decay.map(|d| d.initial_mean),
            intrinsic_final_mean: decay.map(|d| d.final_mean),
            intrinsic_half_life: decay.and_then(|d| d.half_life),
            mean_correlation,
        });
    }
    Ok(Diag {
        algo: m.algo,
        env: m.env,
        seeds,
    })
}
