//! Per-feature embeddings: Fisher vector, VLAD, triangulation (T-emb) and
//! F-FAemb. Each maps one reduced local feature to a long vector so that any
//! aggregator can pool them afterwards.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    gmm_posteriors, nearest_centroid, nearest_centroids, GmmCodebook, KmeansCodebook,
};
use crate::error::{Error, Result};
use crate::linalg::{self, NORM_EPS};

pub const FFAEMB_DEFAULT_M: usize = 5;
pub const FFAEMB_DEFAULT_MU: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMethod {
    Fv,
    Vlad,
    Temb,
    Ffaemb,
}

impl EmbeddingMethod {
    /// Embedded dimension for PCA dimension `d` and vocabulary size `k`.
    pub fn embedded_dim(self, d: usize, k: usize) -> usize {
        match self {
            EmbeddingMethod::Fv => 2 * k * d,
            EmbeddingMethod::Vlad | EmbeddingMethod::Temb => k * d,
            EmbeddingMethod::Ffaemb => k * d * (d + 1) / 2,
        }
    }

    pub fn uses_gmm(self) -> bool {
        self == EmbeddingMethod::Fv
    }
}

impl std::str::FromStr for EmbeddingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fv" => Ok(EmbeddingMethod::Fv),
            "vlad" => Ok(EmbeddingMethod::Vlad),
            "temb" => Ok(EmbeddingMethod::Temb),
            "ffaemb" => Ok(EmbeddingMethod::Ffaemb),
            other => Err(Error::Parameter(format!("unknown embedding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSet {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub method: EmbeddingMethod,
}

/// Fisher vector of one feature: all first-order blocks, then all
/// second-order blocks.
pub fn embed_fv(gmm: &GmmCodebook, x: &[f64]) -> Result<Vec<f64>> {
    let post = gmm_posteriors(gmm, x)?;
    let (k, d) = (gmm.k(), gmm.dim());
    let mut out = vec![0.0; 2 * k * d];
    let (first, second) = out.split_at_mut(k * d);
    for i in 0..k {
        let p = post[i];
        let w = gmm.weights[i];
        let a = p / w.sqrt();
        let b = p / (2.0 * w).sqrt();
        for j in 0..d {
            let z = (x[j] - gmm.means[i][j]) / gmm.variances[i][j].sqrt();
            first[i * d + j] = a * z;
            second[i * d + j] = b * (z * z - 1.0);
        }
    }
    Ok(out)
}

/// Residual to the nearest centroid in that centroid's block, zeros elsewhere.
pub fn embed_vlad(codebook: &KmeansCodebook, x: &[f64]) -> Result<Vec<f64>> {
    let i = nearest_centroid(codebook, x)?;
    let d = codebook.dim();
    let mut out = vec![0.0; codebook.k() * d];
    for (o, (xj, cj)) in out[i * d..(i + 1) * d]
        .iter_mut()
        .zip(x.iter().zip(&codebook.centroids[i]))
    {
        *o = xj - cj;
    }
    Ok(out)
}

/// Unit residual direction to every centroid; a zero residual gives a zero
/// block.
pub fn embed_temb(codebook: &KmeansCodebook, x: &[f64]) -> Result<Vec<f64>> {
    codebook.check_dim(x)?;
    let d = codebook.dim();
    let mut out = vec![0.0; codebook.k() * d];
    for (block, c) in out.chunks_exact_mut(d).zip(&codebook.centroids) {
        for (b, (xj, cj)) in block.iter_mut().zip(x.iter().zip(c)) {
            *b = xj - cj;
        }
        let n = linalg::norm(block);
        if n < NORM_EPS {
            block.fill(0.0);
        } else {
            block.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(out)
}

/// Length of the flattened upper triangle of a `d×d` symmetric matrix.
pub fn triangle_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Flattens `r·rᵀ` to its upper triangle (row-major, diagonal included) with
/// off-diagonal entries scaled by √2, which keeps Frobenius inner products.
pub fn flatten_outer(r: &[f64], out: &mut [f64]) {
    let mut pos = 0;
    for i in 0..r.len() {
        out[pos] = r[i] * r[i];
        pos += 1;
        for j in i + 1..r.len() {
            out[pos] = std::f64::consts::SQRT_2 * r[i] * r[j];
            pos += 1;
        }
    }
}

/// Same flattening for an arbitrary symmetric row-major matrix.
pub fn flatten_symmetric(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(triangle_len(d));
    for i in 0..d {
        out.push(a[i * d + i]);
        for j in i + 1..d {
            out.push(std::f64::consts::SQRT_2 * a[i * d + j]);
        }
    }
    out
}

/// Local coding weights: minimize ‖x − Σγ_i c_i‖² + mu·‖γ‖² subject to
/// Σγ_i = 1 over the `m` nearest centroids. Returns (support, weights).
pub fn local_coding(
    codebook: &KmeansCodebook,
    x: &[f64],
    m: usize,
    mu: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    codebook.check_dim(x)?;
    if m == 0 || m > codebook.k() {
        return Err(Error::Parameter(format!(
            "F-FAemb support size {m} must be in 1..={}",
            codebook.k()
        )));
    }
    let support = nearest_centroids(codebook, x, m);
    if m == 1 {
        return Ok((support, vec![1.0]));
    }
    let shifted: Vec<Vec<f64>> = support
        .iter()
        .map(|&i| {
            codebook.centroids[i]
                .iter()
                .zip(x)
                .map(|(c, v)| c - v)
                .collect()
        })
        .collect();
    let mut gram = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let g = linalg::dot(&shifted[a], &shifted[b]);
            gram[a * m + b] = g;
            gram[b * m + a] = g;
        }
        gram[a * m + a] += mu;
    }
    let uniform = || vec![1.0 / m as f64; m];
    let weights = match linalg::solve_spd(&gram, &vec![1.0; m]) {
        Some(z) => {
            let total: f64 = z.iter().sum();
            if total.abs() > NORM_EPS && total.is_finite() {
                z.into_iter().map(|v| v / total).collect()
            } else {
                log::warn!("singular local coding system; using uniform weights");
                uniform()
            }
        }
        None => {
            log::warn!("singular local coding system; using uniform weights");
            uniform()
        }
    };
    Ok((support, weights))
}

pub fn embed_ffaemb(codebook: &KmeansCodebook, x: &[f64], m: usize, mu: f64) -> Result<Vec<f64>> {
    let (support, gamma) = local_coding(codebook, x, m, mu)?;
    let d = codebook.dim();
    let t = triangle_len(d);
    let mut out = vec![0.0; codebook.k() * t];
    let mut residual = vec![0.0; d];
    for (&i, &g) in support.iter().zip(&gamma) {
        for (r, (xj, cj)) in residual
            .iter_mut()
            .zip(x.iter().zip(&codebook.centroids[i]))
        {
            *r = xj - cj;
        }
        let block = &mut out[i * t..(i + 1) * t];
        flatten_outer(&residual, block);
        block.iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// A fitted vocabulary of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Codebook {
    Kmeans(KmeansCodebook),
    Gmm(GmmCodebook),
}

impl Codebook {
    pub fn k(&self) -> usize {
        match self {
            Codebook::Kmeans(c) => c.k(),
            Codebook::Gmm(g) => g.k(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Codebook::Kmeans(c) => c.dim(),
            Codebook::Gmm(g) => g.dim(),
        }
    }
}

/// Embedding method bound to its vocabulary and parameters.
#[derive(Debug, Clone, Copy)]
pub struct Embedder<'a> {
    pub method: EmbeddingMethod,
    pub codebook: &'a Codebook,
    pub ffaemb_m: usize,
    pub ffaemb_mu: f64,
}

impl Embedder<'_> {
    pub fn dim(&self) -> usize {
        self.method
            .embedded_dim(self.codebook.dim(), self.codebook.k())
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        match (self.method, self.codebook) {
            (EmbeddingMethod::Fv, Codebook::Gmm(g)) => embed_fv(g, x),
            (EmbeddingMethod::Vlad, Codebook::Kmeans(c)) => embed_vlad(c, x),
            (EmbeddingMethod::Temb, Codebook::Kmeans(c)) => embed_temb(c, x),
            (EmbeddingMethod::Ffaemb, Codebook::Kmeans(c)) => {
                embed_ffaemb(c, x, self.ffaemb_m, self.ffaemb_mu)
            }
            (method, _) => Err(Error::Contract(format!(
                "{method:?} embedding used with the wrong codebook type"
            ))),
        }
    }

    /// Embeds every feature; output order follows input order.
    pub fn embed_all(&self, features: &[Vec<f64>]) -> Result<EmbeddedSet> {
        let vectors = features
            .par_iter()
            .map(|x| self.embed(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddedSet {
            dim: self.dim(),
            vectors,
            method: self.method,
        })
    }
}
