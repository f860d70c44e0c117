//! Descriptor index, ranking by dot product and average precision with junk
//! removal.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

pub const INDEX_NORM_TOL: f64 = 1e-5;
pub const INDEX_MAGIC: &[u8; 4] = b"SCX1";

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl DescriptorIndex {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        for (id, row) in entries {
            if row.len() != dim {
                return Err(Error::Validation(format!(
                    "descriptor `{id}` has {} dims, index has {dim}",
                    row.len()
                )));
            }
            let n = norm(&row);
            if (n - 1.0).abs() > INDEX_NORM_TOL {
                return Err(Error::Validation(format!(
                    "descriptor `{id}` has norm {n}, expected 1"
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Validation(format!("duplicate descriptor id `{id}`")));
            }
            ids.push(id);
            rows.push(row);
        }
        Ok(DescriptorIndex { dim, ids, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Magic, then u32 LE dim and count, then per entry a u32-length-prefixed
    /// UTF-8 id followed by `dim` f64 LE values.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * (8 * self.dim + 16));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (id, row) in self.ids.iter().zip(&self.rows) {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            row.iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != INDEX_MAGIC {
            return Err(Error::Format("not a descriptor index file".into()));
        }
        let u32_at = |at: usize| -> Result<usize> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| Error::Corruption("index file truncated".into()))
        };
        let dim = u32_at(4)?;
        let count = u32_at(8)?;
        let mut pos = 12;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u32_at(pos)?;
            pos += 4;
            let end = pos + len + 8 * dim;
            if end > bytes.len() {
                return Err(Error::Corruption("index file truncated".into()));
            }
            let id = std::str::from_utf8(&bytes[pos..pos + len])
                .map_err(|_| Error::Corruption("index id is not UTF-8".into()))?
                .to_string();
            let row = bytes[pos + len..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((id, row));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Corruption("trailing bytes after index".into()));
        }
        DescriptorIndex::new(dim, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// All database entries by descending similarity; equal similarities are
/// ordered by id.
pub fn rank(index: &DescriptorIndex, query: &[f64]) -> Result<Vec<(String, f64)>> {
    if query.len() != index.dim {
        return Err(Error::Contract(format!(
            "query has {} dims, index has {}",
            query.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(String, f64)> = index
        .ids
        .iter()
        .zip(&index.rows)
        .map(|(id, row)| (id.clone(), dot(row, query)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// AP after removing junk ids. Positives missing from the ranking count as
/// never retrieved.
pub fn average_precision(
    ranked_ids: &[String],
    positives: &HashSet<String>,
    junk: &HashSet<String>,
) -> Result<f64> {
    let relevant = positives.iter().filter(|p| !junk.contains(*p)).count();
    if relevant == 0 {
        return Err(Error::UndefinedQuery(
            "query has no positives after junk removal".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, id) in ranked_ids
        .iter()
        .filter(|id| !junk.contains(*id))
        .enumerate()
    {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / relevant as f64)
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::Parameter("mAP over zero queries".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Database ids by descending similarity, junk removed.
    pub ranked_ids: Vec<String>,
    pub similarities: Vec<f64>,
    pub ap: f64,
}

pub fn evaluate_query(
    index: &DescriptorIndex,
    query_id: &str,
    query: &[f64],
    positives: &HashSet<String>,
    junk: &HashSet<String>,
) -> Result<RetrievalResult> {
    let (ranked_ids, similarities): (Vec<String>, Vec<f64>) = rank(index, query)?
        .into_iter()
        .filter(|(id, _)| !junk.contains(id))
        .unzip();
    let ap = average_precision(&ranked_ids, positives, junk)?;
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        ranked_ids,
        similarities,
        ap,
    })
}
