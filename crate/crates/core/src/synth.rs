//! Seeded synthetic retrieval datasets with planted classes and bursts.
//!
//! Every class owns a few sparse non-negative pattern vectors. An image of
//! the class places noisy copies of its patterns at random foreground cells
//! (written out as keypoints), fills the other cells with weak non-negative
//! noise, and overwrites `burst_rate·W·H` background cells with exact copies
//! of one of its foreground vectors. The first image of each evaluation
//! class is the query; the rest are its positives. Held-out classes are
//! generated from their own patterns and only carry role `heldout`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    read_manifest, write_keypoints, write_manifest, write_tensor, DatasetManifest, FeatureTensor,
    ImageEntry, ImageRole, KeypointSet, QuerySpec,
};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub heldout_classes: usize,
    pub heldout_images_per_class: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub channels: usize,
    pub foreground_patterns_per_class: usize,
    /// Foreground cells per pattern in every image.
    pub copies_per_pattern: usize,
    /// Probability that a pattern channel is active.
    pub pattern_density: f64,
    /// Noise level relative to a unit pattern activation.
    pub background_noise_scale: f64,
    pub burst_rate: f64,
    /// Image pixels per grid cell, used for keypoint coordinates.
    pub cell_pixels: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            images_per_class: 10,
            heldout_classes: 8,
            heldout_images_per_class: 10,
            grid_w: 12,
            grid_h: 12,
            channels: 64,
            foreground_patterns_per_class: 4,
            copies_per_pattern: 2,
            pattern_density: 0.25,
            background_noise_scale: 0.1,
            burst_rate: 0.3,
            cell_pixels: 32,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("images_per_class", self.images_per_class),
            ("grid_w", self.grid_w),
            ("grid_h", self.grid_h),
            ("channels", self.channels),
            (
                "foreground_patterns_per_class",
                self.foreground_patterns_per_class,
            ),
            ("copies_per_pattern", self.copies_per_pattern),
            ("cell_pixels", self.cell_pixels as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!(
                "synth `{name}` must be at least 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.burst_rate) {
            return Err(Error::Parameter(format!(
                "burst rate {} outside [0, 1]",
                self.burst_rate
            )));
        }
        if !(self.pattern_density > 0.0 && self.pattern_density <= 1.0) {
            return Err(Error::Parameter("pattern density must be in (0, 1]".into()));
        }
        if !(self.background_noise_scale >= 0.0 && self.background_noise_scale.is_finite()) {
            return Err(Error::Parameter("noise scale must be non-negative".into()));
        }
        if self.foreground_cells() > self.grid_w * self.grid_h {
            return Err(Error::Parameter(format!(
                "{} foreground cells do not fit a {}x{} grid",
                self.foreground_cells(),
                self.grid_w,
                self.grid_h
            )));
        }
        Ok(())
    }

    pub fn foreground_cells(&self) -> usize {
        self.foreground_patterns_per_class * self.copies_per_pattern
    }

    pub fn burst_cells(&self) -> usize {
        let wanted = (self.burst_rate * (self.grid_w * self.grid_h) as f64).round() as usize;
        wanted.min(self.grid_w * self.grid_h - self.foreground_cells())
    }
}

/// One generated image before it is written.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub id: String,
    pub class: usize,
    pub role: ImageRole,
    pub tensor: FeatureTensor,
    pub keypoints: KeypointSet,
    /// Zero-based row-major indices of the foreground cells.
    pub foreground: Vec<usize>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn pattern(&mut self) -> Vec<f64> {
        let k = self.cfg.channels;
        let mut p: Vec<f64> = (0..k)
            .map(|_| {
                if self.rng.random::<f64>() < self.cfg.pattern_density {
                    self.rng.random_range(0.5..1.5)
                } else {
                    0.0
                }
            })
            .collect();
        if p.iter().all(|&v| v == 0.0) {
            let ch = self.rng.random_range(0..k);
            p[ch] = self.rng.random_range(0.5..1.5);
        }
        p
    }

    fn noise(&mut self) -> f64 {
        self.cfg.background_noise_scale * self.rng.sample::<f64, _>(StandardNormal)
    }

    fn image(
        &mut self,
        id: String,
        class: usize,
        role: ImageRole,
        patterns: &[Vec<f64>],
    ) -> Result<SynthImage> {
        let cfg = self.cfg;
        let (w, h, k) = (cfg.grid_w, cfg.grid_h, cfg.channels);
        let cells = w * h;
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(&mut self.rng);
        let fg_count = cfg.foreground_cells();
        let foreground: Vec<usize> = order[..fg_count].to_vec();
        let burst: Vec<usize> = order[fg_count..fg_count + cfg.burst_cells()].to_vec();

        let mut data = vec![0.0f32; cells * k];
        for &cell in &order[fg_count..] {
            for v in &mut data[cell * k..(cell + 1) * k] {
                *v = self.noise().abs() as f32;
            }
        }
        for (slot, &cell) in foreground.iter().enumerate() {
            let pattern = &patterns[slot / cfg.copies_per_pattern];
            for (ch, v) in data[cell * k..(cell + 1) * k].iter_mut().enumerate() {
                *v = (pattern[ch] + self.noise()).max(0.0) as f32;
            }
        }
        if !burst.is_empty() {
            let source = foreground[self.rng.random_range(0..fg_count)];
            let copy = data[source * k..(source + 1) * k].to_vec();
            for &cell in &burst {
                data[cell * k..(cell + 1) * k].copy_from_slice(&copy);
            }
        }

        let cell_px = cfg.cell_pixels as f64;
        let (iw, ih) = (w as u32 * cfg.cell_pixels, h as u32 * cfg.cell_pixels);
        let mut sorted_fg = foreground.clone();
        sorted_fg.sort_unstable();
        let points = sorted_fg
            .iter()
            .map(|&cell| {
                let gx = (cell % w + 1) as f64;
                let gy = (cell / w + 1) as f64;
                let jitter = 0.25 * cell_px;
                let px =
                    (gx * cell_px + self.rng.random_range(-jitter..jitter)).clamp(0.0, iw as f64);
                let py =
                    (gy * cell_px + self.rng.random_range(-jitter..jitter)).clamp(0.0, ih as f64);
                (px.round(), py.round())
            })
            .collect();
        Ok(SynthImage {
            id,
            class,
            role,
            tensor: FeatureTensor::new(w, h, k, data)?,
            keypoints: KeypointSet {
                image_width: iw,
                image_height: ih,
                points,
            },
            foreground: sorted_fg,
        })
    }
}

/// Generates all images in memory. Evaluation classes come first, then
/// held-out classes; the order is part of the determinism contract.
pub fn generate_images(config: &SynthConfig) -> Result<Vec<SynthImage>> {
    config.validate()?;
    let mut gen = Generator {
        cfg: config,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut images = Vec::new();
    let groups = [
        (
            "c",
            ImageRole::Database,
            config.classes,
            config.images_per_class,
        ),
        (
            "h",
            ImageRole::Heldout,
            config.heldout_classes,
            config.heldout_images_per_class,
        ),
    ];
    for (prefix, role, classes, per_class) in groups {
        for class in 0..classes {
            let patterns: Vec<Vec<f64>> = (0..config.foreground_patterns_per_class)
                .map(|_| gen.pattern())
                .collect();
            for i in 0..per_class {
                let role = if role == ImageRole::Database && i == 0 {
                    ImageRole::Query
                } else {
                    role
                };
                let id = format!("{prefix}{class:02}_{i:03}");
                images.push(gen.image(id, class, role, &patterns)?);
            }
        }
    }
    Ok(images)
}

pub fn manifest_for(images: &[SynthImage]) -> DatasetManifest {
    let entries = images
        .iter()
        .map(|img| ImageEntry {
            id: img.id.clone(),
            tensor_path: PathBuf::from("tensors").join(format!("{}.scf", img.id)),
            keypoints_path: Some(PathBuf::from("keypoints").join(format!("{}.kp", img.id))),
            role: img.role,
        })
        .collect();
    let queries = images
        .iter()
        .filter(|q| q.role == ImageRole::Query)
        .map(|q| QuerySpec {
            query_id: q.id.clone(),
            positive_ids: images
                .iter()
                .filter(|i| i.role == ImageRole::Database && i.class == q.class)
                .map(|i| i.id.clone())
                .collect(),
            junk_ids: Vec::new(),
        })
        .collect();
    DatasetManifest {
        images: entries,
        queries,
    }
}

/// Writes tensors, keypoints and `manifest.json` under `out_dir` and returns
/// the manifest as read back (paths resolved).
pub fn generate_dataset(
    config: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let images = generate_images(config)?;
    for sub in ["tensors", "keypoints"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let manifest = manifest_for(&images);
    for (img, entry) in images.iter().zip(&manifest.images) {
        write_tensor(&img.tensor, out_dir.join(&entry.tensor_path))?;
        if let Some(kp) = &entry.keypoints_path {
            write_keypoints(&img.keypoints, out_dir.join(kp))?;
        }
    }
    let path = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &path)?;
    read_manifest(&path)
}
