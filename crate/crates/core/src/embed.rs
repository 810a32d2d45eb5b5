use alloc::vec;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Deterministic map from an observation batch `[n, S, H, W]` to `[n, d]`.
pub trait Embedder {
    fn embed(&self, obs: &Tensor) -> Result<Tensor>;
    fn kind(&self) -> &'static str;
}

/// Flattens every observation to its pixel vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawPixels;

impl Embedder for RawPixels {
    fn embed(&self, obs: &Tensor) -> Result<Tensor> {
        let n = *obs
            .shape()
            .first()
            .ok_or_else(|| Error::Invalid("empty observation batch".into()))?;
        obs.clone().reshape(&[n, obs.len() / n])
    }

    fn kind(&self) -> &'static str {
        "raw"
    }
}

/// Euclidean distance between rows `i` of `a` and `j` of `b` (both `[n, d]`).
pub(crate) fn row_distance(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
    let d = a.shape()[1];
    let (ra, rb) = (&a.data()[i * d..(i + 1) * d], &b.data()[j * d..(j + 1) * d]);
    libm::sqrt(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Embeds in chunks to bound peak memory.
pub(crate) fn embed_chunked(embed: &dyn Embedder, obs: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = obs.shape()[0];
    if n <= chunk {
        return embed.embed(obs);
    }
    let mut data = vec![];
    let mut width = 0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = embed.embed(&obs.slice_rows(start, end)?)?;
        width = part.shape()[1];
        data.extend_from_slice(part.data());
        start = end;
    }
    Tensor::new(vec![n, width], data)
}
