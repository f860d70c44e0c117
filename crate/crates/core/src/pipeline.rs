//! End-to-end flow: train every learned component on held-out images, then
//! describe, index and evaluate.
//!
//! Per image: mask → PCA + l2 → embed → pool → (F-FAemb head drop) →
//! power law + l2 → rotation/whitening → (head drop) → l2.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, PoolMode, DEMOCRATIC_DEFAULT_ITERS};
use crate::codebook::{fit_gmm, fit_kmeans, GmmCodebook, KmeansCodebook};
use crate::embed::{Codebook, Embedder, EmbeddingMethod, FFAEMB_DEFAULT_M, FFAEMB_DEFAULT_MU};
use crate::error::{Error, Result};
use crate::ingest::{
    read_keypoints, read_tensor, DatasetManifest, FeatureTensor, ImageEntry, ImageRole, KeypointSet,
};
use crate::linalg::l2_normalize;
use crate::masking::{apply_mask, compute_mask, FeatureSet, MaskKind};
use crate::postprocess::{apply_rotation, fit_rotation, power_law, truncate_ffaemb, RotationModel};
use crate::reduce::{fit_pca, reduce_set, PcaModel};
use crate::retrieval::{evaluate_query, mean_ap, DescriptorIndex, RetrievalResult};

pub const MODEL_MAGIC: &[u8; 4] = b"SCM1";
pub const MODEL_VERSION: u32 = 1;

/// Final l2-normalized image representation.
pub type Descriptor = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mask: MaskKind,
    pub embedding: EmbeddingMethod,
    pub pool: PoolMode,
    pub pca_d: usize,
    pub codebook_k: usize,
    pub pn_alpha: f64,
    pub whiten: bool,
    pub truncate_head: usize,
    pub democratic_iters: usize,
    pub ffaemb_m: usize,
    pub ffaemb_mu: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// MAX-mask + T-emb + democratic pooling at 512 dimensions.
    fn default() -> Self {
        PipelineConfig {
            mask: MaskKind::Max,
            embedding: EmbeddingMethod::Temb,
            pool: PoolMode::Democratic,
            pca_d: 32,
            codebook_k: 20,
            pn_alpha: 0.5,
            whiten: true,
            truncate_head: 128,
            democratic_iters: DEMOCRATIC_DEFAULT_ITERS,
            ffaemb_m: FFAEMB_DEFAULT_M,
            ffaemb_mu: FFAEMB_DEFAULT_MU,
            seed: 0,
        }
    }
}

/// Final dimensions with a published (PCA d, vocabulary size) setting for
/// T-emb with democratic pooling.
pub const DIMENSION_PRESETS: [(usize, usize, usize); 5] = [
    (512, 32, 20),
    (1024, 64, 18),
    (2048, 64, 34),
    (4096, 64, 66),
    (8064, 128, 64),
];

/// Number of leading rotated components T-emb drops.
pub const TEMB_HEAD_DROP: usize = 128;

impl PipelineConfig {
    /// T-emb preset reaching final dimension `dim`.
    pub fn for_dimension(dim: usize) -> Result<Self> {
        let (_, d, k) = DIMENSION_PRESETS
            .iter()
            .find(|(target, _, _)| *target == dim)
            .ok_or_else(|| Error::Parameter(format!("no preset for {dim} dimensions")))?;
        Ok(PipelineConfig {
            pca_d: *d,
            codebook_k: *k,
            ..PipelineConfig::default()
        })
    }

    /// The 4224-dimensional comparison setting for each embedding.
    pub fn comparison_preset(method: EmbeddingMethod) -> Self {
        let (pca_d, codebook_k, truncate_head) = match method {
            EmbeddingMethod::Fv => (48, 44, 0),
            EmbeddingMethod::Vlad => (64, 66, 0),
            EmbeddingMethod::Temb => (64, 68, TEMB_HEAD_DROP),
            EmbeddingMethod::Ffaemb => (32, 10, 0),
        };
        PipelineConfig {
            embedding: method,
            pca_d,
            codebook_k,
            truncate_head,
            ..PipelineConfig::default()
        }
    }

    pub fn embedded_dim(&self) -> usize {
        self.embedding.embedded_dim(self.pca_d, self.codebook_k)
    }

    /// Length of the aggregated vector entering the rotation.
    pub fn aggregated_dim(&self) -> usize {
        match self.embedding {
            EmbeddingMethod::Ffaemb => self.embedded_dim() - self.pca_d * (self.pca_d + 1),
            _ => self.embedded_dim(),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.aggregated_dim() - self.truncate_head
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.pca_d == 0 || self.codebook_k == 0 {
            return bad("pca_d and codebook_k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pn_alpha) {
            return bad(format!("pn_alpha {} outside [0, 1]", self.pn_alpha));
        }
        if self.embedding == EmbeddingMethod::Ffaemb {
            if self.ffaemb_m == 0 || self.ffaemb_m > self.codebook_k {
                return bad(format!(
                    "ffaemb_m {} must be in 1..={}",
                    self.ffaemb_m, self.codebook_k
                ));
            }
            if self.codebook_k < 3 {
                return bad("F-FAemb drops two vocabulary blocks and needs k >= 3".into());
            }
            if self.ffaemb_mu.is_nan() || self.ffaemb_mu < 0.0 {
                return bad("ffaemb_mu must be non-negative".into());
            }
        }
        if self.truncate_head >= self.aggregated_dim() {
            return bad(format!(
                "truncate_head {} leaves nothing of {} dimensions",
                self.truncate_head,
                self.aggregated_dim()
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    pub config: PipelineConfig,
    pub pca: PcaModel,
    pub codebook: Codebook,
    pub rotation: RotationModel,
    /// Ids of the held-out images the model was trained on.
    pub trained_ids: Vec<String>,
}

/// Wall time spent in each describe stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub mask: Duration,
    pub reduce: Duration,
    pub embed: Duration,
    pub pool: Duration,
    pub postprocess: Duration,
}

impl StageTimes {
    pub const NAMES: [&'static str; 5] = ["mask", "reduce", "embed", "pool", "postprocess"];

    pub fn as_array(&self) -> [Duration; 5] {
        [
            self.mask,
            self.reduce,
            self.embed,
            self.pool,
            self.postprocess,
        ]
    }

    pub fn total(&self) -> Duration {
        self.as_array().iter().sum()
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed();
    out
}

/// Learned state needed up to the power-law step.
struct Encoder<'a> {
    config: &'a PipelineConfig,
    pca: &'a PcaModel,
    codebook: &'a Codebook,
}

impl Encoder<'_> {
    fn embedder(&self) -> Embedder<'_> {
        Embedder {
            method: self.config.embedding,
            codebook: self.codebook,
            ffaemb_m: self.config.ffaemb_m,
            ffaemb_mu: self.config.ffaemb_mu,
        }
    }

    fn masked(
        &self,
        tensor: &FeatureTensor,
        kp: Option<&KeypointSet>,
        t: &mut StageTimes,
    ) -> Result<FeatureSet> {
        if tensor.channels() != self.pca.input_dim {
            return Err(Error::Contract(format!(
                "tensor has {} channels, model expects {}",
                tensor.channels(),
                self.pca.input_dim
            )));
        }
        timed(&mut t.mask, || {
            let mask = compute_mask(self.config.mask, tensor, kp)?;
            apply_mask(tensor, &mask)
        })
    }

    /// Aggregated, power-law normalized vector of one image.
    fn encode(
        &self,
        tensor: &FeatureTensor,
        kp: Option<&KeypointSet>,
        t: &mut StageTimes,
    ) -> Result<Vec<f64>> {
        let features = self.masked(tensor, kp, t)?;
        let reduced = timed(&mut t.reduce, || reduce_set(self.pca, &features))?;
        let embedded = timed(&mut t.embed, || {
            reduced
                .vectors
                .iter()
                .map(|x| self.embedder().embed(x))
                .collect::<Result<Vec<_>>>()
        })?;
        let pooled = timed(&mut t.pool, || {
            aggregate(&embedded, self.config.pool, self.config.democratic_iters)
        })?;
        timed(&mut t.postprocess, || {
            let pooled = match self.config.embedding {
                EmbeddingMethod::Ffaemb => truncate_ffaemb(&pooled, self.config.pca_d)?,
                _ => pooled,
            };
            power_law(&pooled, self.config.pn_alpha)
        })
    }
}

impl PipelineModel {
    fn encoder(&self) -> Encoder<'_> {
        Encoder {
            config: &self.config,
            pca: &self.pca,
            codebook: &self.codebook,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.rotation.output_dim()
    }
}

pub fn describe_image(
    model: &PipelineModel,
    tensor: &FeatureTensor,
    keypoints: Option<&KeypointSet>,
) -> Result<Descriptor> {
    describe_image_timed(model, tensor, keypoints).map(|(d, _)| d)
}

pub fn describe_image_timed(
    model: &PipelineModel,
    tensor: &FeatureTensor,
    keypoints: Option<&KeypointSet>,
) -> Result<(Descriptor, StageTimes)> {
    let mut times = StageTimes::default();
    let encoded = model.encoder().encode(tensor, keypoints, &mut times)?;
    let descriptor = timed(&mut times.postprocess, || {
        apply_rotation(&model.rotation, &encoded)
    })?;
    Ok((descriptor, times))
}

/// Baseline: sum of every raw local feature, l2-normalized.
pub fn raw_sum_descriptor(tensor: &FeatureTensor) -> Descriptor {
    let mut acc = vec![0.0; tensor.channels()];
    for i in 0..tensor.locations() {
        acc.iter_mut()
            .zip(tensor.location(i))
            .for_each(|(a, &v)| *a += v as f64);
    }
    l2_normalize(&acc)
}

/// A tensor with its optional keypoints, as listed in a manifest.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub id: String,
    pub role: ImageRole,
    pub tensor: FeatureTensor,
    pub keypoints: Option<KeypointSet>,
}

pub fn load_image(entry: &ImageEntry, with_keypoints: bool) -> Result<LoadedImage> {
    let tensor = read_tensor(&entry.tensor_path)?;
    let keypoints = match (&entry.keypoints_path, with_keypoints) {
        (Some(p), true) => Some(read_keypoints(p)?.0),
        _ => None,
    };
    Ok(LoadedImage {
        id: entry.id.clone(),
        role: entry.role,
        tensor,
        keypoints,
    })
}

pub fn load_images<'a>(
    entries: impl IntoIterator<Item = &'a ImageEntry>,
    with_keypoints: bool,
) -> Result<Vec<LoadedImage>> {
    let entries: Vec<&ImageEntry> = entries.into_iter().collect();
    entries
        .par_iter()
        .map(|e| load_image(e, with_keypoints))
        .collect()
}

/// Fits PCA, vocabulary and rotation on the manifest's held-out images.
pub fn train_pipeline(config: &PipelineConfig, heldout: &DatasetManifest) -> Result<PipelineModel> {
    config.validate()?;
    let entries: Vec<&ImageEntry> = heldout.with_role(ImageRole::Heldout).collect();
    if entries.len() < 2 {
        return Err(Error::in_stage("load")(Error::Parameter(format!(
            "training needs at least 2 held-out images, manifest has {}",
            entries.len()
        ))));
    }
    let images =
        load_images(entries, config.mask == MaskKind::Sift).map_err(Error::in_stage("load"))?;
    train_on_images(config, &images)
}

/// Training on already loaded held-out images.
pub fn train_on_images(config: &PipelineConfig, images: &[LoadedImage]) -> Result<PipelineModel> {
    config.validate()?;
    if images.len() < 2 {
        return Err(Error::in_stage("load")(Error::Parameter(
            "training needs at least 2 held-out images".into(),
        )));
    }
    if let Some(img) = images.iter().find(|i| i.role != ImageRole::Heldout) {
        return Err(Error::Validation(format!(
            "image `{}` is not held-out; training only uses held-out images",
            img.id
        )));
    }
    let channels = images[0].tensor.channels();
    if let Some(img) = images.iter().find(|i| i.tensor.channels() != channels) {
        return Err(Error::in_stage("load")(Error::Validation(format!(
            "image `{}` has {} channels, expected {channels}",
            img.id,
            img.tensor.channels()
        ))));
    }

    let masked: Vec<FeatureSet> = images
        .par_iter()
        .map(|img| {
            let mask = compute_mask(config.mask, &img.tensor, img.keypoints.as_ref())?;
            apply_mask(&img.tensor, &mask)
        })
        .collect::<Result<_>>()
        .map_err(Error::in_stage("mask"))?;

    let total: usize = masked.iter().map(FeatureSet::len).sum();
    let needed = config.pca_d.max(2 * config.codebook_k);
    if total < needed {
        return Err(Error::in_stage("pca")(Error::Parameter(format!(
            "{total} masked held-out features, need at least {needed}"
        ))));
    }
    let pca = fit_pca(&masked, config.pca_d).map_err(Error::in_stage("pca"))?;

    let reduced: Vec<FeatureSet> = masked
        .par_iter()
        .map(|s| reduce_set(&pca, s))
        .collect::<Result<_>>()
        .map_err(Error::in_stage("pca"))?;
    let rows: Vec<&[f64]> = reduced
        .iter()
        .flat_map(|s| s.vectors.iter().map(Vec::as_slice))
        .collect();
    let codebook = if config.embedding.uses_gmm() {
        fit_gmm(&rows, config.codebook_k, config.seed).map(Codebook::Gmm)
    } else {
        fit_kmeans(&rows, config.codebook_k, config.seed).map(Codebook::Kmeans)
    }
    .map_err(Error::in_stage("codebook"))?;

    let encoder = Encoder {
        config,
        pca: &pca,
        codebook: &codebook,
    };
    let encoded: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| {
            encoder.encode(
                &img.tensor,
                img.keypoints.as_ref(),
                &mut StageTimes::default(),
            )
        })
        .collect::<Result<_>>()
        .map_err(Error::in_stage("rotation"))?;
    let rotation = fit_rotation(&encoded, config.whiten, config.truncate_head)
        .map_err(Error::in_stage("rotation"))?;

    Ok(PipelineModel {
        config: config.clone(),
        pca,
        codebook,
        rotation,
        trained_ids: images.iter().map(|i| i.id.clone()).collect(),
    })
}

/// Descriptors for `images`, in input order.
pub fn describe_all(model: &PipelineModel, images: &[LoadedImage]) -> Result<Vec<Descriptor>> {
    images
        .par_iter()
        .map(|img| describe_image(model, &img.tensor, img.keypoints.as_ref()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<RetrievalResult>,
    pub map: f64,
}

impl Evaluation {
    /// `query_id<TAB>ap` rows followed by the `mAP` row, 4 decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!("{}\t{:.4}\n", r.query_id, r.ap));
        }
        out.push_str(&format!("mAP\t{:.4}\n", self.map));
        out
    }
}

/// Scores the manifest's queries against its database images with an
/// arbitrary describer.
pub fn evaluate_with<F>(
    manifest: &DatasetManifest,
    with_keypoints: bool,
    describe: F,
) -> Result<Evaluation>
where
    F: Fn(&LoadedImage) -> Result<Descriptor> + Sync,
{
    if manifest.queries.is_empty() {
        return Err(Error::Parameter("manifest has no queries".into()));
    }
    let database: Vec<&ImageEntry> = manifest.with_role(ImageRole::Database).collect();
    let db_images = load_images(database, with_keypoints)?;
    let db_desc: Vec<Descriptor> = db_images.par_iter().map(&describe).collect::<Result<_>>()?;
    let dim = db_desc.first().map_or(0, Vec::len);
    let index = DescriptorIndex::new(
        dim,
        db_images
            .iter()
            .map(|i| i.id.clone())
            .zip(db_desc)
            .collect(),
    )?;

    let results = manifest
        .queries
        .par_iter()
        .map(|q| {
            let entry = manifest
                .image(&q.query_id)
                .ok_or_else(|| Error::Validation(format!("unknown query `{}`", q.query_id)))?;
            let img = load_image(entry, with_keypoints)?;
            let desc = describe(&img)?;
            let positives: HashSet<String> = q.positive_ids.iter().cloned().collect();
            let junk: HashSet<String> = q.junk_ids.iter().cloned().collect();
            evaluate_query(&index, &q.query_id, &desc, &positives, &junk)
        })
        .collect::<Result<Vec<_>>>()?;
    let aps: Vec<f64> = results.iter().map(|r| r.ap).collect();
    let map = mean_ap(&aps)?;
    Ok(Evaluation { results, map })
}

fn check_disjoint(model: &PipelineModel, manifest: &DatasetManifest) -> Result<()> {
    let trained: HashSet<&str> = model.trained_ids.iter().map(String::as_str).collect();
    let overlap = manifest
        .images
        .iter()
        .filter(|i| i.role != ImageRole::Heldout)
        .find(|i| trained.contains(i.id.as_str()));
    match overlap {
        Some(i) => Err(Error::Validation(format!(
            "model was trained on `{}`, which this evaluation uses",
            i.id
        ))),
        None => Ok(()),
    }
}

pub fn evaluate(model: &PipelineModel, manifest: &DatasetManifest) -> Result<Evaluation> {
    check_disjoint(model, manifest)?;
    evaluate_with(manifest, model.config.mask == MaskKind::Sift, |img| {
        describe_image(model, &img.tensor, img.keypoints.as_ref())
    })
}

/// Index over the manifest's database images.
pub fn build_index(model: &PipelineModel, manifest: &DatasetManifest) -> Result<DescriptorIndex> {
    check_disjoint(model, manifest)?;
    let images = load_images(
        manifest.with_role(ImageRole::Database),
        model.config.mask == MaskKind::Sift,
    )?;
    let desc = describe_all(model, &images)?;
    DescriptorIndex::new(
        model.descriptor_dim(),
        images.into_iter().map(|i| i.id).zip(desc).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSummary {
    pub mean: Duration,
    pub median: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub images: usize,
    pub repetitions: usize,
    /// One entry per name in [`StageTimes::NAMES`].
    pub stages: Vec<(&'static str, StageSummary)>,
    pub total: StageSummary,
}

impl BenchReport {
    pub fn stage(&self, name: &str) -> Option<StageSummary> {
        self.stages
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| *s)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("stage\tmean_ms\tmedian_ms\n");
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        for (name, s) in self
            .stages
            .iter()
            .chain(std::iter::once(&("total", self.total)))
        {
            out.push_str(&format!("{name}\t{:.4}\t{:.4}\n", ms(s.mean), ms(s.median)));
        }
        out
    }
}

fn summarize(mut samples: Vec<Duration>) -> StageSummary {
    samples.sort();
    let n = samples.len();
    let mean = samples.iter().sum::<Duration>() / n as u32;
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    StageSummary { mean, median }
}

/// Per-image describe time by stage, tensor reading excluded. Runs
/// sequentially so stage timings are not distorted by contention.
pub fn bench_images(
    model: &PipelineModel,
    images: &[LoadedImage],
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::Parameter("repetitions must be at least 1".into()));
    }
    if images.is_empty() {
        return Err(Error::Parameter("nothing to benchmark".into()));
    }
    let mut samples: Vec<StageTimes> = Vec::with_capacity(images.len() * repetitions);
    for _ in 0..repetitions {
        for img in images {
            let (_, t) = describe_image_timed(model, &img.tensor, img.keypoints.as_ref())?;
            samples.push(t);
        }
    }
    let stages = StageTimes::NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            (
                name,
                summarize(samples.iter().map(|t| t.as_array()[i]).collect()),
            )
        })
        .collect();
    Ok(BenchReport {
        images: images.len(),
        repetitions,
        stages,
        total: summarize(samples.iter().map(StageTimes::total).collect()),
    })
}

pub fn bench(
    manifest: &DatasetManifest,
    model: &PipelineModel,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::Parameter("repetitions must be at least 1".into()));
    }
    let images = load_images(
        manifest
            .images
            .iter()
            .filter(|i| i.role != ImageRole::Heldout),
        model.config.mask == MaskKind::Sift,
    )?;
    bench_images(model, &images, repetitions)
}

// ---- model container -------------------------------------------------------

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn matrix(&mut self, rows: &[Vec<f64>]) {
        rows.iter().for_each(|r| self.f64s(r));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corruption("model file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // Bound the allocation by what the buffer can actually hold.
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Corruption("model file truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Corruption("model string is not UTF-8".into()))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
        (0..rows).map(|_| self.f64s(cols)).collect()
    }
}

const CODEBOOK_KMEANS: u8 = 0;
const CODEBOOK_GMM: u8 = 1;

impl PipelineModel {
    /// Little-endian container: magic, version, config JSON, trained ids,
    /// PCA, vocabulary, rotation.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MODEL_MAGIC);
        w.u32(MODEL_VERSION as usize);
        w.bytes(self.config.to_json().as_bytes());
        w.u32(self.trained_ids.len());
        self.trained_ids
            .iter()
            .for_each(|id| w.bytes(id.as_bytes()));

        let p = &self.pca;
        w.u32(p.input_dim);
        w.u32(p.output_dim);
        w.f64s(&p.mean);
        w.matrix(&p.projection);
        w.f64s(&p.eigenvalues);

        match &self.codebook {
            Codebook::Kmeans(c) => {
                w.u8(CODEBOOK_KMEANS);
                w.u32(c.k());
                w.u32(c.dim());
                w.matrix(&c.centroids);
            }
            Codebook::Gmm(g) => {
                w.u8(CODEBOOK_GMM);
                w.u32(g.k());
                w.u32(g.dim());
                w.f64s(&g.weights);
                w.matrix(&g.means);
                w.matrix(&g.variances);
            }
        }

        let r = &self.rotation;
        w.u32(r.input_dim);
        w.u8(r.whiten as u8);
        w.f64(r.whiten_eps);
        w.u32(r.truncate_head);
        w.f64s(&r.mean);
        w.matrix(&r.rotation);
        w.f64s(&r.eigenvalues);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)
            .map_err(|_| Error::Format("not a model file".into()))?
            != MODEL_MAGIC
        {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = r.u32()? as u32;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let config_text = r.string()?;
        let config = PipelineConfig::from_json(&config_text)?;
        let n_ids = r.u32()?;
        let trained_ids = (0..n_ids).map(|_| r.string()).collect::<Result<_>>()?;

        let input_dim = r.u32()?;
        let output_dim = r.u32()?;
        let pca = PcaModel {
            input_dim,
            output_dim,
            mean: r.f64s(input_dim)?,
            projection: r.matrix(output_dim, input_dim)?,
            eigenvalues: r.f64s(output_dim)?,
        };

        let tag = r.u8()?;
        let (k, dim) = (r.u32()?, r.u32()?);
        let codebook = match tag {
            CODEBOOK_KMEANS => Codebook::Kmeans(KmeansCodebook {
                centroids: r.matrix(k, dim)?,
            }),
            CODEBOOK_GMM => Codebook::Gmm(GmmCodebook {
                weights: r.f64s(k)?,
                means: r.matrix(k, dim)?,
                variances: r.matrix(k, dim)?,
            }),
            other => return Err(Error::Format(format!("unknown codebook tag {other}"))),
        };

        let rot_dim = r.u32()?;
        let whiten = r.u8()? != 0;
        let whiten_eps = r.f64()?;
        let truncate_head = r.u32()?;
        let rotation = RotationModel {
            input_dim: rot_dim,
            whiten,
            whiten_eps,
            truncate_head,
            mean: r.f64s(rot_dim)?,
            rotation: r.matrix(rot_dim, rot_dim)?,
            eigenvalues: r.f64s(rot_dim)?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after model",
                bytes.len() - r.pos
            )));
        }

        let model = PipelineModel {
            config,
            pca,
            codebook,
            rotation,
            trained_ids,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> Result<()> {
        let c = &self.config;
        let ok = self.pca.output_dim == c.pca_d
            && self.codebook.dim() == c.pca_d
            && self.codebook.k() == c.codebook_k
            && matches!(
                (&self.codebook, c.embedding.uses_gmm()),
                (Codebook::Gmm(_), true) | (Codebook::Kmeans(_), false)
            )
            && self.rotation.input_dim == c.aggregated_dim()
            && self.rotation.truncate_head == c.truncate_head;
        if ok {
            Ok(())
        } else {
            Err(Error::Corruption(
                "model components disagree with its configuration".into(),
            ))
        }
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
