use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Orthogonal initialization.
///
/// The shape is viewed as `rows x cols` with all trailing dims folded into
/// `cols`. The smaller of the two sides ends up orthonormal, scaled by `gain`.
pub fn orthogonal_init(shape: &[usize], gain: f64, seed: u64) -> Result<Tensor> {
    if shape.len() < 2 || shape.contains(&0) {
        return Err(Error::Invalid(alloc::format!(
            "orthogonal_init needs at least two positive dims, got {shape:?}"
        )));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // tall orientation: q is big x small with orthonormal columns
    let (big, small) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut q: Vec<f64> = (0..big * small).map(|_| rng.sample(StandardNormal)).collect();
    gram_schmidt(&mut q, big, small);
    q.iter_mut().for_each(|v| *v *= gain);

    let data = if rows >= cols {
        q
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..big {
            for j in 0..small {
                t[j * cols + i] = q[i * small + j];
            }
        }
        t
    };
    Tensor::new(shape.to_vec(), data)
}

/// Orthonormalizes the columns of a row-major `m x n` matrix in place.
///
/// Modified Gram-Schmidt with a second reorthogonalization pass; the result
/// is the `Q` of a QR decomposition whose `R` has a positive diagonal.
fn gram_schmidt(a: &mut [f64], m: usize, n: usize) {
    for j in 0..n {
        for _ in 0..2 {
            for p in 0..j {
                let dot: f64 = (0..m).map(|i| a[i * n + p] * a[i * n + j]).sum();
                for i in 0..m {
                    a[i * n + j] -= dot * a[i * n + p];
                }
            }
            let norm = libm::sqrt((0..m).map(|i| a[i * n + j] * a[i * n + j]).sum());
            for i in 0..m {
                a[i * n + j] /= norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(w: &Tensor) -> (usize, Vec<f64>) {
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let mut g = vec![0.0; cols * cols];
        for a in 0..cols {
            for b in 0..cols {
                g[a * cols + b] = (0..rows).map(|r| w.data()[r * cols + a] * w.data()[r * cols + b]).sum();
            }
        }
        (cols, g)
    }

    #[test]
    fn square_is_orthonormal() {
        let w = orthogonal_init(&[4, 4], 1.0, 7).unwrap();
        let (n, g) = gram(&w);
        for a in 0..n {
            for b in 0..n {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((g[a * n + b] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tall_with_gain() {
        let w = orthogonal_init(&[8, 4], 2.0, 3).unwrap();
        let (n, g) = gram(&w);
        for a in 0..n {
            for b in 0..n {
                let expect = if a == b { 4.0 } else { 0.0 };
                assert!((g[a * n + b] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wide_has_orthonormal_rows() {
        let w = orthogonal_init(&[3, 2, 2, 2], 1.0, 11).unwrap();
        let cols = 8;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..cols).map(|c| w.data()[a * cols + c] * w.data()[b * cols + c]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn seeded_and_bitwise_stable() {
        let a = orthogonal_init(&[6, 5], 1.3, 42).unwrap();
        let b = orthogonal_init(&[6, 5], 1.3, 42).unwrap();
        let c = orthogonal_init(&[6, 5], 1.3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rank_one_shape_is_rejected() {
        assert!(orthogonal_init(&[5], 1.0, 0).is_err());
    }
}
