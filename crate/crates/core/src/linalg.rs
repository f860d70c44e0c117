//! Small dense helpers shared by the learning stages.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

/// Below this norm a vector is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `v / ‖v‖`, or `v` unchanged when its norm is at most [`NORM_EPS`].
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out);
    out
}

pub fn l2_normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > NORM_EPS {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

const COV_CHUNK: usize = 256;

/// Sample covariance (divided by n−1, or n when n = 1) as a dense row-major
/// `dim×dim` matrix. Partial sums are formed over fixed-size chunks and
/// combined in chunk order so the result does not depend on thread count.
pub fn covariance(rows: &[&[f64]], mean: &[f64]) -> Vec<f64> {
    let dim = mean.len();
    let partials: Vec<Vec<f64>> = rows
        .par_chunks(COV_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; dim * dim];
            let mut centered = vec![0.0; dim];
            for r in chunk {
                for ((c, v), m) in centered.iter_mut().zip(r.iter()).zip(mean) {
                    *c = v - m;
                }
                for i in 0..dim {
                    let ci = centered[i];
                    if ci == 0.0 {
                        continue;
                    }
                    let row = &mut acc[i * dim..i * dim + dim];
                    for j in i..dim {
                        row[j] += ci * centered[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for p in partials {
        cov.iter_mut().zip(p).for_each(|(c, v)| *c += v);
    }
    let denom = (rows.len().max(2) - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    cov
}

/// Eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in non-increasing order (negative round-off clamped to
/// zero) and the matching unit eigenvectors as rows. Each eigenvector is
/// signed so that its largest-magnitude entry (first one on ties) is
/// positive.
pub fn symmetric_eigen_desc(matrix: &[f64], dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = DMatrix::from_row_slice(dim, dim, matrix);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            fix_sign(&mut v);
            v
        })
        .collect();
    (values, vectors)
}

pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Largest deviation of `rows · rowsᵀ` from the identity.
pub fn orthonormality_error(rows: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate().skip(i) {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(a, b) - target).abs());
        }
    }
    worst
}

/// Solves the symmetric positive-definite system `a·x = b` (row-major `a`).
/// Returns `None` when the factorization fails.
pub fn solve_spd(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let m = DMatrix::from_row_slice(n, n, a);
    let chol = m.cholesky()?;
    let x = chol.solve(&nalgebra::DVector::from_column_slice(b));
    let out: Vec<f64> = x.iter().copied().collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}
