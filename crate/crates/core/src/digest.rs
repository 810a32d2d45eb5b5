//! SHA-256 digests of parameter sets and data, for immutability and
//! determinism checks.

use core::fmt;

use sha2::{Digest as _, Sha256};

use crate::diff::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

/// Incremental digest over shapes and raw `f64` bit patterns.
#[derive(Default, Clone)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Hasher(Sha256::new())
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update(bytes);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        for v in values {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data())
    }

    pub fn finish(self) -> Digest {
        Digest(self.0.finalize().into())
    }
}

pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Digest {
    let mut h = Hasher::new();
    for t in tensors {
        h.tensor(t);
    }
    h.finish()
}

pub fn digest_f64s(values: &[f64]) -> Digest {
    let mut h = Hasher::new();
    h.f64s(values);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn hex_display_and_sensitivity() {
        let a = digest_f64s(&[1.0, 2.0]);
        assert_eq!(a.to_string().len(), 64);
        assert_ne!(a, digest_f64s(&[1.0, 2.0000000000000004]));
        assert_eq!(a, digest_f64s(&[1.0, 2.0]));
    }
}
