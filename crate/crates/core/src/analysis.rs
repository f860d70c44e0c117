//! Mask diagnostics: how many features survive, and how correlated the
//! survivors are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{FeatureTensor, KeypointSet};
use crate::linalg::{dot, l2_normalize};
use crate::masking::{compute_mask, FeatureSet, MaskKind};

/// Dot products in this closed interval count as "uncorrelated".
pub const CENTRAL_BAND: f64 = 0.15;
/// Above this many features, pairs are sampled instead of enumerated.
pub const EXACT_PAIR_LIMIT: usize = 5_000;
pub const SAMPLED_PAIRS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionStats {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

pub fn retention_stats<'a, I>(images: I, kind: MaskKind) -> Result<RetentionStats>
where
    I: IntoIterator<Item = (&'a FeatureTensor, Option<&'a KeypointSet>)>,
{
    let per_image = images
        .into_iter()
        .map(|(t, kp)| compute_mask(kind, t, kp).map(|m| m.len() as f64 / t.locations() as f64))
        .collect::<Result<Vec<_>>>()?;
    if per_image.is_empty() {
        return Err(Error::Parameter(
            "retention needs at least one tensor".into(),
        ));
    }
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(RetentionStats { per_image, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceHistogram {
    pub bin_centers: Vec<f64>,
    /// Fraction of pairs per bin; sums to 1.
    pub mass: Vec<f64>,
    pub central_fraction: f64,
    pub pairs: usize,
}

fn bin_of(v: f64, bins: usize) -> usize {
    let t = ((v + 1.0) / 2.0 * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// Histogram over [−1, 1] of pairwise dot products of the l2-normalized
/// features. Sets above [`EXACT_PAIR_LIMIT`] use `SAMPLED_PAIRS` pairs drawn
/// with `seed`.
pub fn covariance_histogram(
    features: &FeatureSet,
    bins: usize,
    seed: u64,
) -> Result<CovarianceHistogram> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "covariance histogram needs at least 2 features, got {n}"
        )));
    }
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let normed: Vec<Vec<f64>> = features.vectors.iter().map(|v| l2_normalize(v)).collect();
    let mut counts = vec![0u64; bins];
    let mut central = 0u64;
    let mut record = |a: usize, b: usize| {
        let v = dot(&normed[a], &normed[b]).clamp(-1.0, 1.0);
        counts[bin_of(v, bins)] += 1;
        if v.abs() <= CENTRAL_BAND {
            central += 1;
        }
    };
    let pairs = if n <= EXACT_PAIR_LIMIT {
        for a in 0..n {
            for b in a + 1..n {
                record(a, b);
            }
        }
        n * (n - 1) / 2
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..SAMPLED_PAIRS {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            record(a, b);
        }
        SAMPLED_PAIRS
    };
    let width = 2.0 / bins as f64;
    Ok(CovarianceHistogram {
        bin_centers: (0..bins).map(|i| -1.0 + width * (i as f64 + 0.5)).collect(),
        mass: counts.iter().map(|&c| c as f64 / pairs as f64).collect(),
        central_fraction: central as f64 / pairs as f64,
        pairs,
    })
}
