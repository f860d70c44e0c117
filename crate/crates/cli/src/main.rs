use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scf_core::aggregate::PoolMode;
use scf_core::analysis::{covariance_histogram, retention_stats};
use scf_core::embed::EmbeddingMethod;
use scf_core::ingest::{read_keypoints, read_manifest, read_tensor, DatasetManifest, ImageRole};
use scf_core::masking::{apply_mask, compute_mask, MaskKind};
use scf_core::pipeline::{
    bench, build_index, describe_image, evaluate, load_images, train_pipeline, PipelineConfig,
    PipelineModel,
};
use scf_core::retrieval::{rank, DescriptorIndex};
use scf_core::synth::{generate_dataset, SynthConfig};
use scf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "scf",
    version,
    about = "Selective convolutional feature descriptors for image retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit PCA, vocabulary and rotation on the manifest's held-out images.
    Train(TrainArgs),
    /// Describe the manifest's database images into an index file.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank an index against one query tensor.
    Query {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        keypoints: Option<PathBuf>,
        /// Print only the best N matches.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Per-query AP and mAP over the manifest's queries.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Mask retention and the per-image covariance histogram.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "max")]
        mask: MaskKind,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        /// Restrict to one role (database, query or heldout).
        #[arg(long)]
        role: Option<RoleArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-stage describe timings, tensor reading excluded.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
    },
    /// Write a seeded synthetic dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Database,
    Query,
    Heldout,
}

impl From<RoleArg> for ImageRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Database => ImageRole::Database,
            RoleArg::Query => ImageRole::Query,
            RoleArg::Heldout => ImageRole::Heldout,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the T-emb preset for this final dimension (512, 1024, 2048, 4096, 8064).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    mask: Option<MaskKind>,
    #[arg(long)]
    embedding: Option<EmbeddingMethod>,
    #[arg(long)]
    pool: Option<PoolMode>,
    #[arg(long)]
    pca_d: Option<usize>,
    #[arg(long)]
    codebook_k: Option<usize>,
    #[arg(long)]
    pn_alpha: Option<f64>,
    #[arg(long)]
    whiten: Option<Switch>,
    #[arg(long)]
    truncate_head: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, self.dim) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                PipelineConfig::from_json(&text)?
            }
            (None, Some(dim)) => PipelineConfig::for_dimension(dim)?,
            (None, None) => PipelineConfig::default(),
        };
        if let Some(v) = self.mask {
            cfg.mask = v;
        }
        if let Some(v) = self.embedding {
            cfg.embedding = v;
        }
        if let Some(v) = self.pool {
            cfg.pool = v;
        }
        if let Some(v) = self.pca_d {
            cfg.pca_d = v;
        }
        if let Some(v) = self.codebook_k {
            cfg.codebook_k = v;
        }
        if let Some(v) = self.pn_alpha {
            cfg.pn_alpha = v;
        }
        if let Some(v) = self.whiten {
            cfg.whiten = matches!(v, Switch::On);
        }
        if let Some(v) = self.truncate_head {
            cfg.truncate_head = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Grid size as WxH, e.g. 12x12.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    burst_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(w)?, parse(h)?))
}

// Io errors built outside the core crate.
fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    read_manifest(path)
}

fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    let stdout_err = |e| io_error(Path::new("<stdout>"), e);
    match cli.command {
        Command::Train(args) => {
            let config = args.config()?;
            let manifest = load_manifest(&args.manifest)?;
            let model = train_pipeline(&config, &manifest)?;
            model.save(&args.out)?;
            writeln!(
                out,
                "trained {}-d model on {} held-out images → {}",
                model.descriptor_dim(),
                model.trained_ids.len(),
                args.out.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Index {
            model,
            manifest,
            out: path,
        } => {
            let model = PipelineModel::load(&model)?;
            let index = build_index(&model, &load_manifest(&manifest)?)?;
            index.save(&path)?;
            writeln!(out, "indexed {} images → {}", index.len(), path.display())
                .map_err(stdout_err)?;
        }
        Command::Query {
            model,
            index,
            tensor,
            keypoints,
            top,
        } => {
            let model = PipelineModel::load(&model)?;
            let index = DescriptorIndex::load(&index)?;
            let tensor = read_tensor(&tensor)?;
            let keypoints = keypoints.map(read_keypoints).transpose()?.map(|(kp, _)| kp);
            let descriptor = describe_image(&model, &tensor, keypoints.as_ref())?;
            let ranked = rank(&index, &descriptor)?;
            let n = top.unwrap_or(ranked.len());
            for (id, sim) in ranked.iter().take(n) {
                writeln!(out, "{id}\t{sim:.6}").map_err(stdout_err)?;
            }
        }
        Command::Evaluate { model, manifest } => {
            let model = PipelineModel::load(&model)?;
            let eval = evaluate(&model, &load_manifest(&manifest)?)?;
            write!(out, "{}", eval.to_tsv()).map_err(stdout_err)?;
        }
        Command::Analyze {
            manifest,
            mask,
            bins,
            role,
            seed,
        } => {
            let manifest = load_manifest(&manifest)?;
            let entries: Vec<_> = match role {
                Some(r) => manifest.with_role(r.into()).collect(),
                None => manifest.images.iter().collect(),
            };
            let images = load_images(entries, mask == MaskKind::Sift)?;
            let retention = retention_stats(
                images.iter().map(|i| (&i.tensor, i.keypoints.as_ref())),
                mask,
            )?;
            // Average of per-image histograms; images with fewer than two
            // surviving features have no pairs and are skipped.
            let mut mass = vec![0.0; bins];
            let mut centers = Vec::new();
            let mut central = 0.0;
            let mut counted = 0usize;
            for img in &images {
                let m = compute_mask(mask, &img.tensor, img.keypoints.as_ref())?;
                let set = apply_mask(&img.tensor, &m)?;
                if set.len() < 2 {
                    continue;
                }
                let h = covariance_histogram(&set, bins, seed)?;
                mass.iter_mut().zip(&h.mass).for_each(|(a, b)| *a += b);
                central += h.central_fraction;
                centers = h.bin_centers;
                counted += 1;
            }
            if counted == 0 {
                return Err(Error::Parameter(
                    "no image keeps two or more features under this mask".into(),
                ));
            }
            writeln!(out, "bin_center\tmass").map_err(stdout_err)?;
            for (c, m) in centers.iter().zip(&mass) {
                writeln!(out, "{c:.4}\t{:.6}", m / counted as f64).map_err(stdout_err)?;
            }
            writeln!(
                out,
                "# mask={mask} images={} retention={:.4} central_fraction={:.4}",
                images.len(),
                retention.mean,
                central / counted as f64
            )
            .map_err(stdout_err)?;
        }
        Command::Bench {
            model,
            manifest,
            repetitions,
        } => {
            let model = PipelineModel::load(&model)?;
            let report = bench(&load_manifest(&manifest)?, &model, repetitions)?;
            write!(out, "{}", report.to_tsv()).map_err(stdout_err)?;
        }
        Command::Synth(args) => {
            let mut cfg = SynthConfig::default();
            if let Some(v) = args.classes {
                cfg.classes = v;
            }
            if let Some(v) = args.per_class {
                cfg.images_per_class = v;
            }
            if let Some((w, h)) = args.grid {
                cfg.grid_w = w;
                cfg.grid_h = h;
            }
            if let Some(v) = args.channels {
                cfg.channels = v;
            }
            if let Some(v) = args.burst_rate {
                cfg.burst_rate = v;
            }
            if let Some(v) = args.seed {
                cfg.seed = v;
            }
            let manifest = generate_dataset(&cfg, &args.out)?;
            writeln!(
                out,
                "wrote {} images and {} queries → {}",
                manifest.images.len(),
                manifest.queries.len(),
                args.out.display()
            )
            .map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}
