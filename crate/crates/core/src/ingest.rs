//! File boundary of the pipeline: binary tensors, keypoint text files and
//! dataset manifests.
//!
//! Tensor layout on disk (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SCF1"
//! 4       4     W (u32)
//! 8       4     H (u32)
//! 12      4     K (u32)
//! 16      4     reserved, must be 0
//! 20      4·WHK f32 values, channel fastest, then x, then y
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SCF1";
pub const TENSOR_HEADER_LEN: usize = 20;

/// One-based grid coordinate of a local feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCoord {
    pub x: u32,
    pub y: u32,
}

impl GridCoord {
    pub fn new(x: u32, y: u32) -> Self {
        GridCoord { x, y }
    }

    /// Row-major ordering key: rows first, then columns.
    pub fn row_major_key(self) -> (u32, u32) {
        (self.y, self.x)
    }
}

/// W×H×K activation grid of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Validation(format!(
                "tensor dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Validation("tensor dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "tensor data has {} values, expected {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at index {pos}"
            )));
        }
        Ok(FeatureTensor {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn locations(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel vector at zero-based row-major location index.
    pub fn location(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn contains(&self, c: GridCoord) -> bool {
        c.x >= 1 && c.y >= 1 && (c.x as usize) <= self.width && (c.y as usize) <= self.height
    }

    /// Zero-based row-major index of a one-based coordinate.
    pub fn index_of(&self, c: GridCoord) -> usize {
        (c.y as usize - 1) * self.width + (c.x as usize - 1)
    }

    pub fn coord_of(&self, index: usize) -> GridCoord {
        GridCoord::new(
            (index % self.width) as u32 + 1,
            (index / self.width) as u32 + 1,
        )
    }

    /// Channel vector at a one-based coordinate, `None` outside the grid.
    pub fn feature(&self, c: GridCoord) -> Option<&[f32]> {
        self.contains(c).then(|| self.location(self.index_of(c)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < TENSOR_HEADER_LEN {
            return Err(Error::Format(format!(
                "tensor header needs {TENSOR_HEADER_LEN} bytes, file has {}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (w, h, k, reserved) = (word(4), word(8), word(12), word(16));
        if reserved != 0 {
            return Err(Error::Format(format!(
                "unsupported tensor version (reserved word {reserved})"
            )));
        }
        let count = (w as u64) * (h as u64) * (k as u64);
        let payload = &bytes[TENSOR_HEADER_LEN..];
        if payload.len() as u64 != count * 4 {
            return Err(Error::Corruption(format!(
                "header declares {w}x{h}x{k} ({} bytes) but payload has {} bytes",
                count * 4,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureTensor::new(w as usize, h as usize, k as usize, data)
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureTensor::decode(&bytes)
}

/// Writes `tensor` in the SCF1 layout. The tensor is re-validated before the
/// file is touched, so a bad tensor never produces a partial file.
pub fn write_tensor(tensor: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let checked = FeatureTensor::new(
        tensor.width,
        tensor.height,
        tensor.channels,
        tensor.data.clone(),
    )?;
    fs::write(path, checked.encode()).map_err(|e| Error::io(path, e))
}

/// Detector keypoints in image pixel coordinates (origin top-left).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub image_width: u32,
    pub image_height: u32,
    pub points: Vec<(f64, f64)>,
}

impl KeypointSet {
    pub fn in_range(&self, (x, y): (f64, f64)) -> bool {
        x.is_finite()
            && y.is_finite()
            && (0.0..=self.image_width as f64).contains(&x)
            && (0.0..=self.image_height as f64).contains(&y)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.image_width, self.image_height);
        for (x, y) in &self.points {
            out.push_str(&format!("{x} {y}\n"));
        }
        out
    }
}

/// Parses keypoint text. Returns the set and the number of out-of-range
/// points that were dropped.
pub fn parse_keypoints(text: &str) -> Result<(KeypointSet, usize)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("keypoint file has no header line".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| s.parse::<u32>().ok().filter(|&v| v >= 1);
    let (image_width, image_height) = match dims.as_slice() {
        [w, h] => match (parse_dim(w), parse_dim(h)) {
            (Some(w), Some(h)) => (w, h),
            _ => return Err(Error::Format(format!("bad keypoint header `{header}`"))),
        },
        _ => return Err(Error::Format(format!("bad keypoint header `{header}`"))),
    };

    let mut set = KeypointSet {
        image_width,
        image_height,
        points: Vec::new(),
    };
    let mut dropped = 0;
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let point = match fields.as_slice() {
            [x, y] => x.parse::<f64>().ok().zip(y.parse::<f64>().ok()),
            _ => None,
        };
        let point =
            point.ok_or_else(|| Error::Format(format!("line {lineno}: bad keypoint `{line}`")))?;
        if set.in_range(point) {
            set.points.push(point);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} out-of-range keypoint(s)");
    }
    Ok((set, dropped))
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<(KeypointSet, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text)
}

pub fn write_keypoints(set: &KeypointSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_text()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageRole {
    Database,
    Query,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub tensor_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints_path: Option<PathBuf>,
    pub role: ImageRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub positive_ids: Vec<String>,
    #[serde(default)]
    pub junk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub queries: Vec<QuerySpec>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for img in &self.images {
            if !ids.insert(img.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate image id `{}`",
                    img.id
                )));
            }
        }
        let known = |id: &str| -> Result<()> {
            if ids.contains(id) {
                Ok(())
            } else {
                Err(Error::Validation(format!("unknown image id `{id}`")))
            }
        };
        for q in &self.queries {
            known(&q.query_id)?;
            let positives: HashSet<&str> = q.positive_ids.iter().map(String::as_str).collect();
            for id in q.positive_ids.iter().chain(&q.junk_ids) {
                known(id)?;
                if *id == q.query_id {
                    return Err(Error::Validation(format!(
                        "query `{id}` lists itself as positive or junk"
                    )));
                }
            }
            if let Some(id) = q.junk_ids.iter().find(|id| positives.contains(id.as_str())) {
                return Err(Error::Validation(format!(
                    "id `{id}` is both positive and junk for query `{}`",
                    q.query_id
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn with_role(&self, role: ImageRole) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(move |i| i.role == role)
    }

    /// Joins relative tensor and keypoint paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for img in &mut self.images {
            img.tensor_path = base.join(&img.tensor_path);
            if let Some(kp) = &mut img.keypoints_path {
                *kp = base.join(&*kp);
            }
        }
    }
}

/// Reads and validates a manifest; relative paths are resolved against the
/// manifest's own directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
    manifest.validate()?;
    manifest.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_json(queries: &str) -> String {
        format!(
            r#"{{"images": [
                {{"id": "a", "tensor_path": "a.scf", "role": "database"}},
                {{"id": "b", "tensor_path": "b.scf", "role": "database"}},
                {{"id": "q", "tensor_path": "q.scf", "keypoints_path": "q.kp", "role": "query"}}
            ], "queries": {queries}}}"#
        )
    }

    fn parse(json: &str) -> Result<DatasetManifest> {
        let m: DatasetManifest = serde_json::from_str(json).unwrap();
        m.validate().map(|_| m)
    }

    #[test]
    fn smallest_tensor_encodes_to_24_bytes() {
        let t = FeatureTensor::new(1, 1, 1, vec![0.0]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"SCF1");
        assert_eq!(FeatureTensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let mut bytes = Vec::from(*TENSOR_MAGIC);
        for v in [1u32, 1, 512, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 100]);
        assert!(matches!(
            FeatureTensor::decode(&bytes),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let mut bytes = FeatureTensor::new(1, 1, 1, vec![1.0]).unwrap().encode();
        bytes[16] = 1;
        assert!(matches!(
            FeatureTensor::decode(&bytes),
            Err(Error::Format(_))
        ));
        bytes[16] = 0;
        bytes[0] = b'X';
        assert!(matches!(
            FeatureTensor::decode(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut bytes = FeatureTensor::new(1, 1, 2, vec![1.0, 2.0])
            .unwrap()
            .encode();
        bytes[20..24].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            FeatureTensor::decode(&bytes),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn write_rejects_nan_before_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.scf");
        let t = FeatureTensor {
            width: 1,
            height: 1,
            channels: 1,
            data: vec![f32::NAN],
        };
        assert!(matches!(write_tensor(&t, &path), Err(Error::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn location_major_layout() {
        // W=2, H=1, K=3: location (1,1) then (2,1).
        let t = FeatureTensor::new(2, 1, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.feature(GridCoord::new(2, 1)).unwrap(), &[4., 5., 6.]);
        assert_eq!(t.coord_of(1), GridCoord::new(2, 1));
        assert!(t.feature(GridCoord::new(3, 1)).is_none());
    }

    #[test]
    fn keypoint_parsing() {
        let (kp, dropped) = parse_keypoints("1024 768\n512.0 384.0\n").unwrap();
        assert_eq!(kp.image_width, 1024);
        assert_eq!(kp.image_height, 768);
        assert_eq!(kp.points, vec![(512.0, 384.0)]);
        assert_eq!(dropped, 0);

        let (kp, dropped) = parse_keypoints("# detector output\n1024 768\n").unwrap();
        assert!(kp.points.is_empty());
        assert_eq!(dropped, 0);

        let (kp, dropped) = parse_keypoints("1024 768\n2000 10\n\n1 1\n").unwrap();
        assert_eq!(kp.points, vec![(1.0, 1.0)]);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn malformed_keypoint_header() {
        assert!(matches!(parse_keypoints(""), Err(Error::Format(_))));
        assert!(matches!(parse_keypoints("1024\n"), Err(Error::Format(_))));
        assert!(matches!(parse_keypoints("0 10\n"), Err(Error::Format(_))));
        assert!(matches!(parse_keypoints("a b\n"), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_validation() {
        let ok = parse(&manifest_json(
            r#"[{"query_id": "q", "positive_ids": ["a"], "junk_ids": []}]"#,
        ))
        .unwrap();
        assert_eq!(ok.images.len(), 3);
        assert_eq!(ok.with_role(ImageRole::Database).count(), 2);

        let err = parse(&manifest_json(
            r#"[{"query_id": "q", "positive_ids": ["x9"]}]"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("x9"), "{err}");

        let err = parse(&manifest_json(
            r#"[{"query_id": "q", "positive_ids": ["a"], "junk_ids": ["a"]}]"#,
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));

        let err = parse(&manifest_json(
            r#"[{"query_id": "q", "positive_ids": ["q"]}]"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("`q`"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let json = r#"{"images": [
            {"id": "a", "tensor_path": "a.scf", "role": "database"},
            {"id": "a", "tensor_path": "b.scf", "role": "database"}], "queries": []}"#;
        let err = parse(json).unwrap_err();
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn manifest_paths_resolved_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, manifest_json("[]")).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.images[0].tensor_path, dir.path().join("a.scf"));
        assert_eq!(
            m.images[2].keypoints_path.as_deref(),
            Some(dir.path().join("q.kp").as_path())
        );
    }
}
