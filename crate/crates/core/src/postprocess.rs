//! Power-law normalization, learned rotation/whitening, and the
//! method-specific head truncations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, l2_normalize_in_place};

pub const DEFAULT_PN_ALPHA: f64 = 0.5;
pub const DEFAULT_WHITEN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub pn_alpha: f64,
    pub whiten: bool,
    pub truncate_head: usize,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            pn_alpha: DEFAULT_PN_ALPHA,
            whiten: true,
            truncate_head: 0,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "power-law exponent {alpha} outside [0, 1]"
        )))
    }
}

/// `sign(x)·|x|^alpha` elementwise (0 stays 0, also for alpha = 0), then l2.
pub fn power_law(v: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| {
            if x == 0.0 {
                0.0
            } else {
                x.signum() * x.abs().powf(alpha)
            }
        })
        .collect();
    l2_normalize_in_place(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationModel {
    pub input_dim: usize,
    pub mean: Vec<f64>,
    /// `input_dim` orthonormal rows by descending eigenvalue.
    pub rotation: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub whiten: bool,
    pub whiten_eps: f64,
    pub truncate_head: usize,
}

impl RotationModel {
    pub fn output_dim(&self) -> usize {
        self.input_dim - self.truncate_head
    }

    /// Mean zero, identity rotation, unit eigenvalues.
    pub fn identity(dim: usize) -> Self {
        RotationModel {
            input_dim: dim,
            mean: vec![0.0; dim],
            rotation: (0..dim)
                .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            eigenvalues: vec![1.0; dim],
            whiten: false,
            whiten_eps: DEFAULT_WHITEN_EPS,
            truncate_head: 0,
        }
    }
}

/// Learns mean and eigenbasis of `train` (post-PN aggregated vectors).
pub fn fit_rotation(
    train: &[Vec<f64>],
    whiten: bool,
    truncate_head: usize,
) -> Result<RotationModel> {
    if train.len() < 2 {
        return Err(Error::Parameter(format!(
            "rotation needs at least 2 training vectors, got {}",
            train.len()
        )));
    }
    let dim = train[0].len();
    if dim == 0 || train.iter().any(|v| v.len() != dim) {
        return Err(Error::Parameter(
            "rotation training vectors must share one non-zero dimension".into(),
        ));
    }
    if truncate_head >= dim {
        return Err(Error::Parameter(format!(
            "cannot drop {truncate_head} of {dim} components"
        )));
    }
    let rows: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
    let mean = linalg::mean(&rows, dim);
    let cov = linalg::covariance(&rows, &mean);
    let (eigenvalues, rotation) = linalg::symmetric_eigen_desc(&cov, dim);
    let rank = eigenvalues
        .iter()
        .filter(|&&e| e > 1e-12 * eigenvalues[0])
        .count();
    if whiten && rank < dim {
        log::warn!(
            "whitening a {dim}-d space learned from rank-{rank} data; null directions are scaled by the regularizer"
        );
    }
    Ok(RotationModel {
        input_dim: dim,
        mean,
        rotation,
        eigenvalues,
        whiten,
        whiten_eps: DEFAULT_WHITEN_EPS,
        truncate_head,
    })
}

/// `R·(v − mean)`, optionally whitened, head-truncated, then l2-normalized.
pub fn apply_rotation(model: &RotationModel, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != model.input_dim {
        return Err(Error::Contract(format!(
            "rotation expects {}-d input, got {}",
            model.input_dim,
            v.len()
        )));
    }
    let centered: Vec<f64> = v.iter().zip(&model.mean).map(|(x, m)| x - m).collect();
    let mut out: Vec<f64> = model
        .rotation
        .iter()
        .zip(&model.eigenvalues)
        .skip(model.truncate_head)
        .map(|(row, &e)| {
            let r = linalg::dot(row, &centered);
            if model.whiten {
                r / (e + model.whiten_eps).sqrt()
            } else {
                r
            }
        })
        .collect();
    l2_normalize_in_place(&mut out);
    Ok(out)
}

/// Drops the leading `d·(d+1)` entries of an aggregated F-FAemb vector.
pub fn truncate_ffaemb(v: &[f64], d: usize) -> Result<Vec<f64>> {
    let head = d * (d + 1);
    if v.len() <= head {
        return Err(Error::Contract(format!(
            "F-FAemb vector of length {} too short to drop {head} components",
            v.len()
        )));
    }
    Ok(v[head..].to_vec())
}
