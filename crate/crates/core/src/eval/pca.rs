use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 10_000;

/// Top two principal directions and the projections onto them.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2d {
    pub mean: Vec<f64>,
    /// Unit directions; a zero vector where the data has no variance left.
    pub components: [Vec<f64>; 2],
    /// Variance along each direction.
    pub eigenvalues: [f64; 2],
    pub points: Vec<(f64, f64)>,
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    c.chunks_exact(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant eigenpair of a symmetric positive semi-definite matrix.
fn power_iteration(c: &[f64], n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return (vec![0.0; n], 0.0);
    }
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    for _ in 0..MAX_ITERS {
        let w = mat_vec(c, &v);
        let nw = norm(&w);
        if nw <= 1e-12 * scale {
            return (vec![0.0; n], 0.0);
        }
        let w: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let diff = norm(&w.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        v = w;
        if diff < TOL {
            break;
        }
    }
    let lambda = v.iter().zip(mat_vec(c, &v)).map(|(a, b)| a * b).sum();
    (v, lambda)
}

/// Centres `vectors` and projects them onto the top two principal
/// directions found by power iteration with deflation.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Pca2d> {
    if vectors.len() < 3 {
        return Err(Error::Domain(format!("projection needs at least 3 vectors, got {}", vectors.len())));
    }
    let n = vectors[0].len();
    if n == 0 || vectors.iter().any(|v| v.len() != n) {
        return dim_err("pca", "vectors must share a positive length");
    }
    let m = vectors.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / m).collect();
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let mut cov = vec![0.0; n * n];
    for x in &centred {
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] += x[i] * x[j] / m;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (v1, l1) = power_iteration(&cov, n, &mut rng);
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = power_iteration(&cov, n, &mut rng);
    if l1 == 0.0 {
        log::warn!("all vectors are identical; projecting to the origin");
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let points = centred.iter().map(|x| (dot(x, &v1), dot(x, &v2))).collect();
    Ok(Pca2d {
        mean,
        components: [v1, v2],
        eigenvalues: [l1, l2],
        points,
    })
}

pub fn pca_project2d(vectors: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    Ok(pca_2d(vectors)?.points)
}
