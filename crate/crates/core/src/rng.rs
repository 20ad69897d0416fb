//! Named, splittable deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and selected by
//! a stream id hashed from a name (plus an optional index), so independent
//! consumers never share state and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;

pub type Rng = ChaCha8Rng;

/// FNV-1a, used only to turn stream names into stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// The stream named `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    keyed(seed, fnv1a(name.as_bytes()))
}

fn keyed(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The `index`-th child of stream `name`, for per-trial or per-seed work.
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut key = name.as_bytes().to_vec();
    key.push(0xff);
    key.extend_from_slice(&index.to_le_bytes());
    keyed(seed, fnv1a(&key))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Matrix with iid standard normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

/// Haar-ish random orthogonal matrix via modified Gram-Schmidt on a
/// Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Matrix {
    loop {
        let g = gaussian_matrix(n, n, rng);
        let mut cols: Vec<Vec<f64>> = (0..n).map(|c| g.column(c)).collect();
        let mut ok = true;
        for j in 0..n {
            for i in 0..j {
                let d: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (lo, hi) = cols.split_at_mut(j);
                for (x, y) in hi[0].iter_mut().zip(&lo[i]) {
                    *x -= d * y;
                }
            }
            let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            return Matrix::from_fn(n, n, |r, c| cols[c][r]);
        }
    }
}

/// Random symmetric positive definite matrix with eigenvalues log-spaced
/// between `lambda_max / condition` and `lambda_max`.
pub fn random_spd(n: usize, condition: f64, lambda_max: f64, rng: &mut Rng) -> Matrix {
    let q = random_orthogonal(n, rng);
    let eigs: Vec<f64> = (0..n)
        .map(|i| {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            lambda_max * condition.powf(-frac)
        })
        .collect();
    let d = Matrix::from_diag(&eigs);
    (&(&q * &d) * &q.transpose()).symmetrize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "x").random();
        let b: u64 = stream(7, "x").random();
        let c: u64 = stream(7, "y").random();
        let d: u64 = substream(7, "x", 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = stream(1, "orth");
        let q = random_orthogonal(9, &mut rng);
        let e = &(&q.transpose() * &q) - &Matrix::identity(9);
        assert!(e.max_abs() < 1e-12);
    }

    #[test]
    fn spd_has_requested_spectrum() {
        let mut rng = stream(2, "spd");
        let x = random_spd(6, 100.0, 3.0, &mut rng);
        let e = crate::linalg::sym_eig(&x, 1e-14).unwrap();
        assert!((e.max() - 3.0).abs() < 1e-12);
        assert!((e.min() - 0.03).abs() < 1e-12);
    }
}
