//! Pooling of an embedded set into one vector: sum, average, max and
//! democratic aggregation.
//!
//! Democratic weights λ balance every feature's total similarity to the
//! pooled vector: λ_i·(Kλ)_i = C with K the Gram matrix of the embedded
//! vectors. They are found by symmetric Sinkhorn scaling
//! `λ_i ← λ_i / sqrt(λ_i·(Kλ)_i / C)`, all indices updated from the same
//! `Kλ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddedSet;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, NORM_EPS};

pub const DEMOCRATIC_TARGET: f64 = 1.0;
pub const DEMOCRATIC_DEFAULT_ITERS: usize = 10;
pub const DEMOCRATIC_EPS: f64 = 1e-10;
pub const DEMOCRATIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Sum,
    Avg,
    Max,
    Democratic,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(PoolMode::Sum),
            "avg" | "average" => Ok(PoolMode::Avg),
            "max" => Ok(PoolMode::Max),
            "democratic" | "demo" => Ok(PoolMode::Democratic),
            other => Err(Error::Parameter(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemocraticSolution {
    pub weights: Vec<f64>,
    pub target: f64,
    /// max_i |λ_i·(Kλ)_i − C| over features with a nonzero embedding.
    pub residual: f64,
    pub iterations: usize,
}

fn check_non_empty(vectors: &[Vec<f64>]) -> Result<usize> {
    let dim = vectors
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyInput("cannot pool an empty set".into()))?;
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Contract("embedded vectors differ in length".into()));
    }
    Ok(dim)
}

pub fn pool_vectors(vectors: &[Vec<f64>], mode: PoolMode) -> Result<Vec<f64>> {
    let dim = check_non_empty(vectors)?;
    match mode {
        PoolMode::Sum | PoolMode::Avg => {
            let mut acc = vec![0.0; dim];
            for v in vectors {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            }
            if mode == PoolMode::Avg {
                let n = vectors.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
            }
            Ok(acc)
        }
        PoolMode::Max => {
            let mut acc = vectors[0].clone();
            for v in &vectors[1..] {
                acc.iter_mut().zip(v).for_each(|(a, &x)| *a = a.max(x));
            }
            Ok(acc)
        }
        PoolMode::Democratic => pool_democratic_vectors(vectors, DEMOCRATIC_DEFAULT_ITERS),
    }
}

pub fn pool(set: &EmbeddedSet, mode: PoolMode) -> Result<Vec<f64>> {
    pool_vectors(&set.vectors, mode)
}

/// Full Gram matrix, row-major.
pub fn gram_matrix(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| dot(&vectors[i], &vectors[j])).collect())
        .collect();
    rows.concat()
}

fn balance(kernel: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = weights.len();
    (0..n)
        .map(|i| weights[i] * dot(&kernel[i * n..(i + 1) * n], weights))
        .collect()
}

fn residual(balance: &[f64], active: &[bool], target: f64) -> f64 {
    balance
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(b, _)| (b - target).abs())
        .fold(0.0, f64::max)
}

pub fn democratic_weights_vectors(
    vectors: &[Vec<f64>],
    max_iter: usize,
) -> Result<DemocraticSolution> {
    check_non_empty(vectors)?;
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    if norms.iter().all(|&n| n <= NORM_EPS) {
        return Err(Error::Degenerate(
            "every embedded vector is zero; democratic weights undefined".into(),
        ));
    }
    if vectors.len() == 1 {
        return Ok(DemocraticSolution {
            weights: vec![1.0 / norms[0]],
            target: DEMOCRATIC_TARGET,
            residual: 0.0,
            iterations: 0,
        });
    }
    let n = vectors.len();
    let kernel = gram_matrix(vectors);
    let active: Vec<bool> = (0..n).map(|i| kernel[i * n + i] > 0.0).collect();
    let mut weights = vec![1.0; n];
    let mut iterations = 0;
    let mut current = balance(&kernel, &weights);
    while iterations < max_iter && residual(&current, &active, DEMOCRATIC_TARGET) >= DEMOCRATIC_TOL
    {
        for (w, &b) in weights.iter_mut().zip(&current) {
            if b > 0.0 {
                *w /= (b.max(DEMOCRATIC_EPS) / DEMOCRATIC_TARGET).sqrt();
            }
        }
        iterations += 1;
        current = balance(&kernel, &weights);
    }
    Ok(DemocraticSolution {
        residual: residual(&current, &active, DEMOCRATIC_TARGET),
        weights,
        target: DEMOCRATIC_TARGET,
        iterations,
    })
}

pub fn democratic_weights(set: &EmbeddedSet, max_iter: usize) -> Result<DemocraticSolution> {
    democratic_weights_vectors(&set.vectors, max_iter)
}

pub fn pool_democratic_vectors(vectors: &[Vec<f64>], max_iter: usize) -> Result<Vec<f64>> {
    let sol = democratic_weights_vectors(vectors, max_iter)?;
    let mut acc = vec![0.0; vectors[0].len()];
    for (v, &w) in vectors.iter().zip(&sol.weights) {
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += w * x);
    }
    Ok(acc)
}

pub fn pool_democratic(set: &EmbeddedSet, max_iter: usize) -> Result<Vec<f64>> {
    pool_democratic_vectors(&set.vectors, max_iter)
}

/// Pools with `mode`, using `democratic_iters` for democratic aggregation.
pub fn aggregate(
    vectors: &[Vec<f64>],
    mode: PoolMode,
    democratic_iters: usize,
) -> Result<Vec<f64>> {
    match mode {
        PoolMode::Democratic => pool_democratic_vectors(vectors, democratic_iters),
        other => pool_vectors(vectors, other),
    }
}
