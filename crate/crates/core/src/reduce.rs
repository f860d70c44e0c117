//! PCA compression of local features followed by l2 normalization.

use crate::error::{Error, Result};
use crate::linalg::{self, NORM_EPS};
use crate::masking::FeatureSet;

pub use crate::linalg::l2_normalize;

/// Relative eigenvalue magnitude under which a component counts as empty.
const NULL_EIGEN_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// `output_dim` orthonormal rows, by descending eigenvalue.
    pub projection: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// Fits PCA on the union of `sets`, keeping `d` components.
pub fn fit_pca(sets: &[FeatureSet], d: usize) -> Result<PcaModel> {
    let rows: Vec<&[f64]> = sets
        .iter()
        .flat_map(|s| s.vectors.iter().map(Vec::as_slice))
        .collect();
    fit_pca_rows(&rows, d)
}

pub fn fit_pca_rows(rows: &[&[f64]], d: usize) -> Result<PcaModel> {
    let input_dim = rows
        .first()
        .map(|r| r.len())
        .ok_or_else(|| Error::Parameter("PCA needs at least one sample".into()))?;
    if rows.iter().any(|r| r.len() != input_dim) {
        return Err(Error::Parameter("PCA samples differ in dimension".into()));
    }
    if d == 0 || d > input_dim {
        return Err(Error::Parameter(format!(
            "PCA output dimension {d} must be in 1..={input_dim}"
        )));
    }
    if d > rows.len() {
        return Err(Error::Parameter(format!(
            "PCA to {d} dimensions needs at least {d} samples, got {}",
            rows.len()
        )));
    }
    let mean = linalg::mean(rows, input_dim);
    let cov = linalg::covariance(rows, &mean);
    let (values, vectors) = linalg::symmetric_eigen_desc(&cov, input_dim);

    let scale = values[0].max(f64::MIN_POSITIVE);
    let nonzero = values
        .iter()
        .filter(|&&v| v > NULL_EIGEN_REL * scale)
        .count();
    if nonzero < d {
        log::warn!(
            "only {nonzero} of {d} requested principal components carry variance; \
             the rest complete an orthonormal basis"
        );
    }
    Ok(PcaModel {
        input_dim,
        output_dim: d,
        mean,
        projection: vectors.into_iter().take(d).collect(),
        eigenvalues: values.into_iter().take(d).collect(),
    })
}

impl PcaModel {
    /// `M·(x − mean)` without normalization.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Contract(format!(
                "PCA expects {}-d input, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .projection
            .iter()
            .map(|row| linalg::dot(row, &centered))
            .collect())
    }
}

/// Projects and l2-normalizes one local feature; a zero projection stays zero.
pub fn reduce_feature(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = model.project(x)?;
    linalg::l2_normalize_in_place(&mut y);
    Ok(y)
}

pub fn reduce_set(model: &PcaModel, set: &FeatureSet) -> Result<FeatureSet> {
    let vectors = set
        .vectors
        .iter()
        .map(|x| reduce_feature(model, x))
        .collect::<Result<_>>()?;
    Ok(FeatureSet {
        dim: model.output_dim,
        vectors,
        source_coords: set.source_coords.clone(),
    })
}

/// True if `v` has norm 0 or 1 within `tol`.
pub fn is_zero_or_unit(v: &[f64], tol: f64) -> bool {
    let n = linalg::norm(v);
    n <= NORM_EPS || (n - 1.0).abs() <= tol
}
