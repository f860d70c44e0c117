//! Visual vocabularies: k-means centroids and diagonal-covariance GMMs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::sq_dist;

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_CHANGE_TOL: f64 = 1e-4;
pub const GMM_MAX_ITER: usize = 100;
pub const GMM_REL_TOL: f64 = 1e-5;
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansCodebook {
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmCodebook {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

/// Per-iteration record of a fit, kept for convergence checks.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    /// k-means: distortion after each assignment step.
    /// GMM: total log-likelihood after each E-step.
    pub objective: Vec<f64>,
}

impl KmeansCodebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "codebook is {}-d, input is {}-d",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Index of the closest centroid; ties go to the smaller index.
pub fn nearest_centroid(codebook: &KmeansCodebook, x: &[f64]) -> Result<usize> {
    codebook.check_dim(x)?;
    Ok(nearest(&codebook.centroids, x).0)
}

/// Indices of the `m` closest centroids, closest first, ties by index.
pub fn nearest_centroids(codebook: &KmeansCodebook, x: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = codebook
        .centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (sq_dist(c, x), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(m).map(|(_, i)| i).collect()
}

fn check_samples(samples: &[&[f64]]) -> Result<usize> {
    let dim = samples
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::Parameter("no samples".into()))?;
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::Parameter(
            "samples must share one non-zero dimension".into(),
        ));
    }
    Ok(dim)
}

fn kmeans_plus_plus(samples: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = samples.len();
    let mut centroids = vec![samples[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Round-off can walk past the last positive weight.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap();
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = samples[pick].to_vec();
        d2.iter_mut()
            .zip(samples)
            .for_each(|(d, s)| *d = d.min(sq_dist(s, &c)));
        centroids.push(c);
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding.
pub fn fit_kmeans(samples: &[&[f64]], k: usize, seed: u64) -> Result<KmeansCodebook> {
    fit_kmeans_traced(samples, k, seed).map(|(cb, _)| cb)
}

pub fn fit_kmeans_traced(
    samples: &[&[f64]],
    k: usize,
    seed: u64,
) -> Result<(KmeansCodebook, FitTrace)> {
    let dim = check_samples(samples)?;
    let n = samples.len();
    if k == 0 || n < k {
        return Err(Error::Parameter(format!(
            "k-means with k={k} needs at least k samples, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(samples, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = FitTrace::default();

    for _ in 0..KMEANS_MAX_ITER {
        let nearest_all: Vec<(usize, f64)> =
            samples.par_iter().map(|s| nearest(&centroids, s)).collect();
        let mut changed = 0usize;
        let mut distortion = 0.0;
        for (a, (idx, d)) in assignment.iter_mut().zip(&nearest_all) {
            if *a != *idx {
                changed += 1;
                *a = *idx;
            }
            distortion += d;
        }
        trace.objective.push(distortion);
        if trace.objective.len() > 1 && (changed as f64) / (n as f64) < KMEANS_CHANGE_TOL {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in samples.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a]
                .iter_mut()
                .zip(s.iter())
                .for_each(|(acc, v)| *acc += v);
        }
        for ((c, sum), &count) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if count > 0 {
                for (ci, si) in c.iter_mut().zip(sum) {
                    *ci = si / count as f64;
                }
            }
        }
        // Empty clusters move onto the points worst served by the new means.
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut by_error: Vec<(f64, usize)> = samples
                .iter()
                .zip(&assignment)
                .enumerate()
                .map(|(i, (s, &a))| (sq_dist(s, &centroids[a]), i))
                .collect();
            by_error.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (j, (_, i)) in empty.into_iter().zip(by_error) {
                centroids[j] = samples[i].to_vec();
            }
        }
    }
    Ok((KmeansCodebook { centroids }, trace))
}

impl GmmCodebook {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "GMM is {}-d, input is {}-d",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// `ln w_i + ln N(x; μ_i, diag σ_i²)` for every component.
    pub fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), var)| {
                let mut acc = 0.0;
                for ((xi, mi), vi) in x.iter().zip(mu).zip(var) {
                    let r = xi - mi;
                    acc += ln_2pi + vi.ln() + r * r / vi;
                }
                w.ln() - 0.5 * acc
            })
            .collect()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized posteriors from log-joint values; uniform when every term
/// underflows.
fn normalize_log(log_joint: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_joint);
    if !lse.is_finite() {
        log::warn!("GMM posterior underflow; using uniform responsibilities");
        return vec![1.0 / log_joint.len() as f64; log_joint.len()];
    }
    log_joint.iter().map(|v| (v - lse).exp()).collect()
}

pub fn gmm_posteriors(codebook: &GmmCodebook, x: &[f64]) -> Result<Vec<f64>> {
    codebook.check_dim(x)?;
    Ok(normalize_log(&codebook.log_joint(x)))
}

fn init_from_kmeans(samples: &[&[f64]], centroids: &[Vec<f64>], dim: usize) -> GmmCodebook {
    let k = centroids.len();
    let n = samples.len() as f64;
    let mut global_mean = vec![0.0; dim];
    for s in samples {
        global_mean
            .iter_mut()
            .zip(s.iter())
            .for_each(|(m, v)| *m += v / n);
    }
    let mut global_var = vec![0.0; dim];
    for s in samples {
        for ((g, v), m) in global_var.iter_mut().zip(s.iter()).zip(&global_mean) {
            *g += (v - m) * (v - m) / n;
        }
    }

    let mut counts = vec![0usize; k];
    let mut var = vec![vec![0.0; dim]; k];
    for s in samples {
        let (a, _) = nearest(centroids, s);
        counts[a] += 1;
        for ((acc, v), c) in var[a].iter_mut().zip(s.iter()).zip(&centroids[a]) {
            *acc += (v - c) * (v - c);
        }
    }
    let variances = var
        .into_iter()
        .zip(&counts)
        .map(|(v, &c)| {
            if c >= 2 {
                v.into_iter()
                    .map(|x| (x / c as f64).max(VARIANCE_FLOOR))
                    .collect()
            } else {
                global_var.iter().map(|&g| g.max(VARIANCE_FLOOR)).collect()
            }
        })
        .collect();
    let total: f64 = counts.iter().map(|&c| c.max(1) as f64).sum();
    GmmCodebook {
        weights: counts.iter().map(|&c| c.max(1) as f64 / total).collect(),
        means: centroids.to_vec(),
        variances,
    }
}

/// EM for a diagonal GMM, initialized from k-means on the same seed.
pub fn fit_gmm(samples: &[&[f64]], k: usize, seed: u64) -> Result<GmmCodebook> {
    fit_gmm_traced(samples, k, seed).map(|(g, _)| g)
}

pub fn fit_gmm_traced(samples: &[&[f64]], k: usize, seed: u64) -> Result<(GmmCodebook, FitTrace)> {
    let dim = check_samples(samples)?;
    let n = samples.len();
    if k == 0 || n < 2 * k {
        return Err(Error::Parameter(format!(
            "GMM with k={k} needs at least {} samples, got {n}",
            2 * k
        )));
    }
    let kmeans = fit_kmeans(samples, k, seed)?;
    let mut gmm = init_from_kmeans(samples, &kmeans.centroids, dim);
    let mut trace = FitTrace::default();

    for _ in 0..GMM_MAX_ITER {
        // E-step; per-sample work is independent, the reduction is ordered.
        let per_sample: Vec<(Vec<f64>, f64)> = samples
            .par_iter()
            .map(|s| {
                let lj = gmm.log_joint(s);
                let lse = log_sum_exp(&lj);
                (normalize_log(&lj), lse)
            })
            .collect();
        let ll: f64 = per_sample.iter().map(|(_, l)| l).sum();
        let prev = trace.objective.last().copied();
        trace.objective.push(ll);
        if let Some(prev) = prev {
            if ll - prev < GMM_REL_TOL * ll.abs() {
                break;
            }
        }

        let mut soft = vec![0.0; k];
        let mut first = vec![vec![0.0; dim]; k];
        for (s, (resp, _)) in samples.iter().zip(&per_sample) {
            for i in 0..k {
                let r = resp[i];
                if r == 0.0 {
                    continue;
                }
                soft[i] += r;
                first[i]
                    .iter_mut()
                    .zip(s.iter())
                    .for_each(|(a, v)| *a += r * v);
            }
        }
        let means: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                if soft[i] > 0.0 {
                    first[i].iter().map(|v| v / soft[i]).collect()
                } else {
                    gmm.means[i].clone()
                }
            })
            .collect();
        let mut second = vec![vec![0.0; dim]; k];
        for (s, (resp, _)) in samples.iter().zip(&per_sample) {
            for i in 0..k {
                let r = resp[i];
                if r == 0.0 {
                    continue;
                }
                for ((a, v), m) in second[i].iter_mut().zip(s.iter()).zip(&means[i]) {
                    *a += r * (v - m) * (v - m);
                }
            }
        }
        for i in 0..k {
            if soft[i] > 0.0 {
                gmm.variances[i] = second[i]
                    .iter()
                    .map(|v| (v / soft[i]).max(VARIANCE_FLOOR))
                    .collect();
            }
        }
        gmm.means = means;
        let total: f64 = soft.iter().sum();
        gmm.weights = soft
            .iter()
            .map(|s| (s / total).max(f64::MIN_POSITIVE))
            .collect();
    }
    let total: f64 = gmm.weights.iter().sum();
    gmm.weights.iter_mut().for_each(|w| *w /= total);
    Ok((gmm, trace))
}
