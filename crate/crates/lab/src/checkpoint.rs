//! Binary checkpoints of named tensors, and the backbone metadata sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CURIOCKP"
//! version  u32      1
//! count    u32      number of tensors
//! then per tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8     0 = f64
//!   rank     u32, extents u64 x rank
//!   payload  f64 x product(extents)
//! ```
//!
//! Trailing bytes after the last tensor are rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use curio_core::diff::{Sequential, Tensor};
use curio_core::pretrain::{Backbone, PretrainConfig};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"CURIOCKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LabError::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(LabError::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LabError::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| LabError::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(LabError::format(path, format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| LabError::format(path, format!("{name}: implausible shape {shape:?}")))?;
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| LabError::format(path, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(LabError::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(LabError::io(path))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    decode(&bytes, path)
}

/// Named parameters of several networks, each name prefixed with
/// `prefix/`.
pub fn named<'a>(parts: &[(&str, &'a Sequential)]) -> Vec<(String, &'a Tensor)> {
    parts
        .iter()
        .flat_map(|(prefix, net)| {
            net.named_params()
                .map(move |(n, t)| (format!("{prefix}/{n}"), t))
        })
        .collect()
}

/// Tensors whose names start with `prefix/`, with the prefix stripped.
pub fn strip_prefix(tensors: &[(String, Tensor)], prefix: &str) -> Vec<(String, Tensor)> {
    let p = format!("{prefix}/");
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Facts about how a backbone was produced, stored next to its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub objective: String,
    pub obs_shape: [usize; 3],
    pub feature_shape: [usize; 3],
    pub env: String,
    pub seed: u64,
    pub steps_per_env: usize,
    pub num_envs: usize,
    pub epochs: usize,
    pub k_near: usize,
    pub k_far: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub data_digest: String,
    pub param_digest: String,
    pub losses: Vec<f64>,
    /// Held-out temporal coherence ratio of the trained backbone.
    pub coherence_ratio: Option<f64>,
    /// Same ratio for a randomly initialized backbone on the same data.
    pub coherence_ratio_random: Option<f64>,
}

impl BackboneMeta {
    pub fn new(backbone: &Backbone, cfg: &PretrainConfig) -> Self {
        BackboneMeta {
            objective: "triplet_margin".into(),
            obs_shape: backbone.obs_shape(),
            feature_shape: backbone.feature_shape(),
            env: String::new(),
            seed: 0,
            steps_per_env: 0,
            num_envs: cfg.num_envs,
            epochs: 0,
            k_near: cfg.k_near,
            k_far: cfg.k_far,
            margin: cfg.margin,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            data_digest: String::new(),
            param_digest: backbone.digest().to_string(),
            losses: Vec::new(),
            coherence_ratio: None,
            coherence_ratio_random: None,
        }
    }
}

/// `<checkpoint>.json`
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_backbone(path: &Path, backbone: &Backbone, meta: &BackboneMeta) -> Result<()> {
    save(path, &named(&[("backbone", backbone.network())]))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta).map_err(LabError::json(&side))?;
    fs::write(&side, text + "\n").map_err(LabError::io(&side))
}

/// Loads a frozen backbone and checks it against the sidecar digest.
pub fn load_backbone(path: &Path) -> Result<(Arc<Backbone>, BackboneMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(LabError::io(&side))?;
    let meta: BackboneMeta = serde_json::from_str(&text).map_err(LabError::json(&side))?;
    let tensors = strip_prefix(&load(path)?, "backbone");
    let mut fresh = Backbone::new(meta.obs_shape, 0)?.network().clone();
    fresh.load_named(&tensors)?;
    let backbone = Backbone::from_network(fresh, true)?;
    if backbone.digest().to_string() != meta.param_digest {
        return Err(LabError::format(path, "weights do not match the sidecar digest"));
    }
    Ok((Arc::new(backbone), meta))
}
