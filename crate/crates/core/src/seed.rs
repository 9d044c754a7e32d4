//! Reproducible random streams.
//!
//! A [`Seed`] names a ChaCha20 stream by `(root, stream)`; the same pair always
//! yields the same sequence on every platform. Parallel work derives one
//! stream per task index so results never depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed {
    pub root: u64,
    pub stream: u64,
}

impl Seed {
    pub const fn new(root: u64, stream: u64) -> Self {
        Seed { root, stream }
    }

    /// Child stream for task `index`; distinct indices never collide with each
    /// other or with the parent.
    pub fn derive(&self, index: u64) -> Seed {
        Seed {
            root: self.root,
            stream: splitmix(self.stream ^ splitmix(index.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.root);
        rng.set_stream(self.stream);
        rng
    }
}

impl Default for Seed {
    fn default() -> Self {
        Seed::new(0x11F0_A4C3, 0)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix with i.i.d. N(0, scale²) entries.
pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}

/// Uniform sample from the Frobenius ball of the given radius.
pub fn uniform_ball(rows: usize, cols: usize, radius: f64, rng: &mut impl Rng) -> Matrix {
    let dir = gaussian_matrix(rows, cols, 1.0, rng);
    let norm = dir.frobenius();
    let u: f64 = rng.gen();
    let r = radius * u.powf(1.0 / (rows * cols) as f64);
    if norm == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    dir.scale(r / norm)
}

/// Uniform sample from the Frobenius sphere of the given radius.
pub fn uniform_sphere(rows: usize, cols: usize, radius: f64, rng: &mut impl Rng) -> Matrix {
    let dir = gaussian_matrix(rows, cols, 1.0, rng);
    let norm = dir.frobenius();
    dir.scale(radius / norm)
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the sign
/// fix on the diagonal of R).
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let g = gaussian_matrix(n, n, 1.0, rng);
    // Modified Gram-Schmidt on the columns.
    let mut q = vec![vec![0.0; n]; n]; // q[j] = column j
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| g.get(i, j)).collect();
        for qk in q.iter().take(j) {
            let d: f64 = v.iter().zip(qk).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(qk) {
                *vi -= d * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        q[j] = v;
    }
    let mut out = Matrix::zeros(n, n);
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}
