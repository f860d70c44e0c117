//! SIFT-, SUM- and MAX-masks: which grid locations of a tensor survive.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FeatureTensor, GridCoord, KeypointSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Sift,
    Sum,
    Max,
    None,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sift" => Ok(MaskKind::Sift),
            "sum" => Ok(MaskKind::Sum),
            "max" => Ok(MaskKind::Max),
            "none" => Ok(MaskKind::None),
            other => Err(Error::Parameter(format!("unknown mask kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Sift => "sift",
            MaskKind::Sum => "sum",
            MaskKind::Max => "max",
            MaskKind::None => "none",
        })
    }
}

/// Selected grid locations, unique and sorted row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    kind: MaskKind,
    coords: Vec<GridCoord>,
}

impl Mask {
    fn from_set(kind: MaskKind, set: BTreeSet<(u32, u32)>) -> Self {
        Mask {
            kind,
            coords: set.into_iter().map(|(y, x)| GridCoord::new(x, y)).collect(),
        }
    }

    /// Every location of a `width×height` grid.
    pub fn full(width: usize, height: usize) -> Self {
        let coords = (1..=height as u32)
            .flat_map(|y| (1..=width as u32).map(move |x| GridCoord::new(x, y)))
            .collect();
        Mask {
            kind: MaskKind::None,
            coords,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn coords(&self) -> &[GridCoord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Per-channel argmax locations, deduplicated. Ties go to the smallest
/// row-major index.
pub fn max_mask(tensor: &FeatureTensor) -> Mask {
    let k = tensor.channels();
    let mut best_idx = vec![0usize; k];
    let mut best_val: Vec<f32> = tensor.location(0).to_vec();
    for loc in 1..tensor.locations() {
        for (ch, &v) in tensor.location(loc).iter().enumerate() {
            if v > best_val[ch] {
                best_val[ch] = v;
                best_idx[ch] = loc;
            }
        }
    }
    let set = best_idx
        .into_iter()
        .map(|i| tensor.coord_of(i).row_major_key())
        .collect();
    Mask::from_set(MaskKind::Max, set)
}

/// Channel sum at every location, row-major.
pub fn location_sums(tensor: &FeatureTensor) -> Vec<f64> {
    (0..tensor.locations())
        .map(|i| tensor.location(i).iter().map(|&v| v as f64).sum())
        .collect()
}

/// Median with the even-count convention (mean of the two middle values).
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Locations whose channel sum reaches the median of all channel sums.
pub fn sum_mask(tensor: &FeatureTensor) -> Mask {
    let sums = location_sums(tensor);
    let threshold = median(&sums);
    let set = sums
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| tensor.coord_of(i).row_major_key())
        .collect();
    Mask::from_set(MaskKind::Sum, set)
}

fn project(coord: f64, grid: usize, image: u32) -> u32 {
    let scaled = (coord * grid as f64 / image as f64 + 0.5).floor();
    scaled.clamp(1.0, grid as f64) as u32
}

/// Grid cells hit by the keypoints, `round(x·W/W_I)` with half-up rounding
/// and clamping into the grid. No keypoints gives the full-grid mask.
pub fn sift_mask(keypoints: &KeypointSet, grid_w: usize, grid_h: usize) -> Result<Mask> {
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::Parameter(format!(
            "grid must be at least 1x1, got {grid_w}x{grid_h}"
        )));
    }
    if keypoints.points.is_empty() {
        return Ok(Mask::full(grid_w, grid_h));
    }
    let set = keypoints
        .points
        .iter()
        .map(|&(x, y)| {
            (
                project(y, grid_h, keypoints.image_height),
                project(x, grid_w, keypoints.image_width),
            )
        })
        .collect();
    Ok(Mask::from_set(MaskKind::Sift, set))
}

/// Computes the mask of `kind` for `tensor`. SIFT without keypoints falls
/// back to the full grid.
pub fn compute_mask(
    kind: MaskKind,
    tensor: &FeatureTensor,
    keypoints: Option<&KeypointSet>,
) -> Result<Mask> {
    match kind {
        MaskKind::Max => Ok(max_mask(tensor)),
        MaskKind::Sum => Ok(sum_mask(tensor)),
        MaskKind::None => Ok(Mask::full(tensor.width(), tensor.height())),
        MaskKind::Sift => match keypoints {
            Some(kp) => sift_mask(kp, tensor.width(), tensor.height()),
            None => {
                log::warn!("SIFT mask requested without keypoints; using the full grid");
                Ok(Mask::full(tensor.width(), tensor.height()))
            }
        },
    }
}

/// Selected local features with the grid location each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub source_coords: Vec<GridCoord>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Copies the channel vector at every mask coordinate, in mask order.
pub fn apply_mask(tensor: &FeatureTensor, mask: &Mask) -> Result<FeatureSet> {
    let mut vectors = Vec::with_capacity(mask.len());
    for &c in mask.coords() {
        let f = tensor.feature(c).ok_or_else(|| {
            Error::Contract(format!(
                "mask coordinate ({}, {}) outside {}x{} grid",
                c.x,
                c.y,
                tensor.width(),
                tensor.height()
            ))
        })?;
        vectors.push(f.iter().map(|&v| v as f64).collect());
    }
    Ok(FeatureSet {
        dim: tensor.channels(),
        vectors,
        source_coords: mask.coords().to_vec(),
    })
}
