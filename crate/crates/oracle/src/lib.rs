//! Reference computations for the test suites.
//!
//! Nothing here depends on the `liparch` crate. Matrices are plain
//! `Vec<Vec<f64>>` in row-major order so the oracles cannot share a code path
//! with the implementation they check.

pub type Dense = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Dense {
    vec![vec![0.0; c]; r]
}

pub fn identity(n: usize) -> Dense {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let k = b.len();
    let m = b[0].len();
    let mut out = zeros(n, m);
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for p in 0..k {
            let aip = a[i][p];
            for j in 0..m {
                out[i][j] += aip * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Dense) -> Dense {
    let r = a.len();
    let c = a[0].len();
    let mut t = zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            t[j][i] = a[i][j];
        }
    }
    t
}

pub fn matpow(a: &Dense, n: u32) -> Dense {
    let mut out = identity(a.len());
    for _ in 0..n {
        out = matmul(&out, a);
    }
    out
}

/// Singular values in decreasing order, by one-sided Jacobi rotations.
///
/// Columns of a working copy are orthogonalised pairwise until every pair is
/// orthogonal to machine precision; the column norms are then the singular
/// values. Quadratically convergent and accurate to a few ulps.
pub fn singular_values(a: &Dense) -> Vec<f64> {
    // Work on the orientation with at least as many rows as columns.
    let mut u = if a.len() >= a[0].len() {
        a.clone()
    } else {
        transpose(a)
    };
    let rows = u.len();
    let cols = u[0].len();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for row in u.iter() {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in u.iter_mut() {
                    let up = row[p];
                    let uq = row[q];
                    row[p] = c * up - s * uq;
                    row[q] = s * up + c * uq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| u[i][j] * u[i][j]).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

pub fn spectral_norm(a: &Dense) -> f64 {
    singular_values(a)[0]
}

/// Deterministic pseudo-random dense matrix (SplitMix64 + Box-Muller), kept
/// separate from the implementation's RNG on purpose.
pub fn random_dense(rows: usize, cols: usize, seed: u64) -> Dense {
    let mut state = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut next = move || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        ((z >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    let mut m = zeros(rows, cols);
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            let u1: f64 = next();
            let u2: f64 = next();
            *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
    m
}

/// Closed-form MLP covering constant for uniform layer bounds: the constant
/// per-layer term times the geometric series in `gamma^(2/3)`, summed over
/// `depth` layers.
pub fn uniform_mlp_covering(
    l_sigma: f64,
    b_z: f64,
    b_w1: f64,
    b_w2: f64,
    gamma: f64,
    depth: u32,
) -> f64 {
    let term = l_sigma.powf(2.0 / 3.0)
        * ((b_w1 * (b_z * b_w2).powi(2)).cbrt() + (b_z * b_w2 * b_w1.powi(2)).cbrt());
    let g = gamma.powf(2.0 / 3.0);
    term * (1.0 - g.powi(depth as i32)) / (1.0 - g)
}

/// Ranks with ties averaged, 1-based.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Ordinary least squares slope and intercept of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_on_known_matrices() {
        let d = vec![vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.5]];
        let sv = singular_values(&d);
        assert!((sv[0] - 3.0).abs() < 1e-14);
        assert!((sv[2] - 0.5).abs() < 1e-14);
        // shear: singular values are the golden ratio and its inverse
        let shear = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let sv = singular_values(&shear);
        assert!((sv[0] - phi).abs() < 1e-14);
        assert!((sv[1] - 1.0 / phi).abs() < 1e-14);
    }

    #[test]
    fn frobenius_identity_holds_for_random() {
        let a = random_dense(7, 5, 3);
        let fro2: f64 = a.iter().flatten().map(|v| v * v).sum();
        let sv2: f64 = singular_values(&a).iter().map(|s| s * s).sum();
        assert!((fro2 - sv2).abs() < 1e-11 * fro2);
    }

    #[test]
    fn spearman_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [8.0, 4.0, 2.0, 1.0];
        assert!((spearman(&a, &b) + 1.0).abs() < 1e-15);
    }
}
