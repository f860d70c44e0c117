//! Shared fixtures and independent reference implementations.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scf_core::codebook::{GmmCodebook, KmeansCodebook};
use scf_core::ingest::DatasetManifest;
use scf_core::synth::{generate_dataset, SynthConfig};
use tempfile::TempDir;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_kmeans(rng: &mut ChaCha8Rng, k: usize, d: usize) -> KmeansCodebook {
    KmeansCodebook {
        centroids: (0..k).map(|_| gaussian(rng, d)).collect(),
    }
}

pub fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmCodebook {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
    let total: f64 = raw.iter().sum();
    GmmCodebook {
        weights: raw.iter().map(|w| w / total).collect(),
        means: (0..k).map(|_| gaussian(rng, d)).collect(),
        variances: (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(0.3..3.0)).collect())
            .collect(),
    }
}

/// A synthetic dataset written to a fresh temporary directory.
pub struct SynthDataset {
    pub dir: TempDir,
    pub manifest: DatasetManifest,
}

pub fn synth(config: &SynthConfig) -> SynthDataset {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(config, dir.path()).unwrap();
    SynthDataset { dir, manifest }
}

/// Classic one-shot VLAD: assign every feature, then accumulate residuals
/// per centroid in feature order.
pub fn vlad_oracle(cb: &KmeansCodebook, features: &[Vec<f64>]) -> Vec<f64> {
    let (k, d) = (cb.centroids.len(), cb.centroids[0].len());
    let mut out = vec![0.0; k * d];
    for x in features {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in cb.centroids.iter().enumerate() {
            let dist: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_d {
                best_d = dist;
                best = i;
            }
        }
        for j in 0..d {
            out[best * d + j] += x[j] - cb.centroids[best][j];
        }
    }
    out
}

/// Textbook Fisher vector (unnormalized gradient sums) of a feature set.
pub fn fv_oracle(gmm: &GmmCodebook, features: &[Vec<f64>]) -> Vec<f64> {
    let (k, d) = (gmm.weights.len(), gmm.means[0].len());
    let mut mu = vec![0.0; k * d];
    let mut sigma = vec![0.0; k * d];
    for x in features {
        let log_p: Vec<f64> = (0..k)
            .map(|i| {
                let mut s = gmm.weights[i].ln();
                for j in 0..d {
                    let var = gmm.variances[i][j];
                    let diff = x[j] - gmm.means[i][j];
                    s -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                }
                s
            })
            .collect();
        let top = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = log_p.iter().map(|l| (l - top).exp()).sum();
        for i in 0..k {
            let gamma = (log_p[i] - top).exp() / z;
            for j in 0..d {
                let u = (x[j] - gmm.means[i][j]) / gmm.variances[i][j].sqrt();
                mu[i * d + j] += gamma * u / gmm.weights[i].sqrt();
                sigma[i * d + j] += gamma * (u * u - 1.0) / (2.0 * gmm.weights[i]).sqrt();
            }
        }
    }
    mu.extend(sigma);
    mu
}

/// AP by its definition: the mean, over relevant items, of precision at
/// the rank where each one is found (junk removed first).
pub fn brute_force_ap(
    ranked: &[String],
    positives: &HashSet<String>,
    junk: &HashSet<String>,
) -> f64 {
    let kept: Vec<&String> = ranked.iter().filter(|id| !junk.contains(*id)).collect();
    let relevant = positives.iter().filter(|p| !junk.contains(*p)).count();
    let mut total = 0.0;
    for (rank, id) in kept.iter().enumerate() {
        if positives.contains(*id) {
            let found = kept[..=rank]
                .iter()
                .filter(|x| positives.contains(**x))
                .count();
            total += found as f64 / (rank + 1) as f64;
        }
    }
    total / relevant as f64
}

/// A random ranking over ids "0".."n", with random positive and junk sets;
/// some positives are left out of the ranking.
pub fn random_ranking(rng: &mut ChaCha8Rng) -> (Vec<String>, HashSet<String>, HashSet<String>) {
    use rand::seq::SliceRandom;
    let n = rng.random_range(1..=20);
    let mut ids: Vec<String> = (0..n + 3).map(|i| i.to_string()).collect();
    ids.shuffle(rng);
    let mut positives = HashSet::new();
    let mut junk = HashSet::new();
    for id in &ids {
        match rng.random_range(0..10) {
            0..=2 => {
                positives.insert(id.clone());
            }
            3 => {
                junk.insert(id.clone());
            }
            _ => {}
        }
    }
    if positives.iter().all(|p| junk.contains(p)) {
        positives.insert(ids[0].clone());
        junk.remove(&ids[0]);
    }
    ids.truncate(n);
    (ids, positives, junk)
}
