use std::path::Path;
use std::process::{Command, Output};

fn scf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scf"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a trained model in a temporary directory.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--seed", "3"]);
    ok(&[
        "train",
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&dir.path().join("model.bin")),
        "--pca-d",
        "16",
        "--codebook-k",
        "8",
        "--truncate-head",
        "0",
    ]);
    dir
}

#[test]
fn evaluate_prints_per_query_ap_then_map() {
    let dir = trained();
    let stdout = ok(&[
        "evaluate",
        "--model",
        s(&dir.path().join("model.bin")),
        "--manifest",
        s(&dir.path().join("data/manifest.json")),
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in &lines[..4] {
        let (id, ap) = line.split_once('\t').unwrap();
        assert!(id.starts_with('c') && id.ends_with("_000"));
        let ap: f64 = ap.parse().unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }
    let (label, value) = lines[4].split_once('\t').unwrap();
    assert_eq!(label, "mAP");
    assert_eq!(value.split('.').nth(1).unwrap().len(), 4);
}

#[test]
fn index_then_query_ranks_every_database_image() {
    let dir = trained();
    let model = dir.path().join("model.bin");
    let index = dir.path().join("db.idx");
    let manifest = dir.path().join("data/manifest.json");
    ok(&[
        "index",
        "--model",
        s(&model),
        "--manifest",
        s(&manifest),
        "--out",
        s(&index),
    ]);
    let tensor = dir.path().join("data/tensors/c01_000.scf");
    let stdout = ok(&[
        "query",
        "--model",
        s(&model),
        "--index",
        s(&index),
        "--tensor",
        s(&tensor),
    ]);
    let sims: Vec<f64> = stdout
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(sims.len(), 36);
    assert!(sims.windows(2).all(|w| w[0] >= w[1]));

    let top = ok(&[
        "query",
        "--model",
        s(&model),
        "--index",
        s(&index),
        "--tensor",
        s(&tensor),
        "--top",
        "2",
    ]);
    assert_eq!(top.lines().count(), 2);
}

#[test]
fn analyze_emits_histogram_and_summary() {
    let dir = trained();
    let stdout = ok(&[
        "analyze",
        "--manifest",
        s(&dir.path().join("data/manifest.json")),
        "--bins",
        "8",
        "--mask",
        "sum",
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "bin_center\tmass");
    let mass: f64 = lines[1..9]
        .iter()
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((mass - 1.0).abs() < 1e-5);
    assert!(lines[9].starts_with("# mask=sum images=120 retention=0.5000"));
}

#[test]
fn bench_reports_stages() {
    let dir = trained();
    let stdout = ok(&[
        "bench",
        "--model",
        s(&dir.path().join("model.bin")),
        "--manifest",
        s(&dir.path().join("data/manifest.json")),
        "--repetitions",
        "1",
    ]);
    let stages: Vec<&str> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(
        stages,
        ["mask", "reduce", "embed", "pool", "postprocess", "total"]
    );
}

#[test]
fn synth_flags_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "synth",
            "--out",
            s(&out),
            "--classes",
            "2",
            "--per-class",
            "3",
            "--grid",
            "6x5",
            "--channels",
            "8",
            "--burst-rate",
            "0.1",
            "--seed",
            "9",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let tensor = std::fs::read(a.join("tensors/c00_000.scf")).unwrap();
    assert_eq!(
        tensor,
        std::fs::read(b.join("tensors/c00_000.scf")).unwrap()
    );
    // Header: magic, W=6, H=5, K=8.
    assert_eq!(&tensor[..4], b"SCF1");
    assert_eq!(u32::from_le_bytes(tensor[4..8].try_into().unwrap()), 6);
    assert_eq!(u32::from_le_bytes(tensor[8..12].try_into().unwrap()), 5);
    assert_eq!(u32::from_le_bytes(tensor[12..16].try_into().unwrap()), 8);
    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(
        manifest,
        std::fs::read_to_string(b.join("manifest.json")).unwrap()
    );
    assert!(manifest.contains("c01_002"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = scf(&[
        "evaluate",
        "--model",
        s(&missing),
        "--manifest",
        s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        "{\"images\": [], \"queries\": [{\"query_id\": \"q\"}]}",
    )
    .unwrap();
    let out = scf(&[
        "train",
        "--manifest",
        s(&bad),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = scf(&[
        "train",
        "--manifest",
        s(&bad),
        "--out",
        "m",
        "--pn-alpha",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = scf(&["synth", "--out", s(dir.path()), "--grid", "12by12"]);
    assert_eq!(out.status.code(), Some(2));

    let out = scf(&["synth", "--out", s(dir.path()), "--burst-rate", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_accepts_config_file_and_presets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--seed", "4"]);
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"mask": "sum", "embedding": "vlad", "pool": "sum", "pca_d": 8, "codebook_k": 4, "truncate_head": 0}"#,
    )
    .unwrap();
    let stdout = ok(&[
        "train",
        "--config",
        s(&config),
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&dir.path().join("vlad.bin")),
    ]);
    assert!(stdout.starts_with("trained 32-d model on 80 held-out images"));

    let stdout = ok(&[
        "train",
        "--dim",
        "512",
        "--whiten",
        "off",
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&dir.path().join("temb.bin")),
    ]);
    assert!(stdout.starts_with("trained 512-d model"));
}
