//! End-to-end run of the command-line tool on a tiny toy dataset.

use std::fs;
use std::path::Path;
use std::process::Command;

use facialgan::checkpoint::{Checkpoint, Kind};
use facialgan::trainlog::parse_log;

fn run(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_facialgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_data_train_generate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = dir.path().join("tiny.json");
    fs::write(
        &config,
        r#"{"scale": "desk", "data.image_size": 16, "base_channels": 4, "max_channels": 8,
            "style_dim": 8, "latent_dim": 4, "checkpoint_every": 2, "log_every": 1}"#,
    )
    .unwrap();
    run(&["toy-data", "--out", s(&data), "--n", "8", "--size", "16", "--seed", "3"]);
    assert!(data.join("attributes.csv").exists());

    let seg = dir.path().join("seg.fgc");
    run(&[
        "train-seg", "--data", s(&data), "--out", s(&seg), "--epochs", "2", "--batch", "4", "--lr", "1e-2",
        "--img-size", "16", "--seed", "0", "--config", s(&config),
    ]);
    assert_eq!(Checkpoint::load(&seg).unwrap().metadata.segmenter_training.unwrap().epochs, 2);

    let out = dir.path().join("run");
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train", "--data", s(&data), "--seg-ckpt", s(&seg), "--out", s(&out), "--batch", "2",
            "--img-size", "16", "--seed", "1", "--config", s(&config),
        ];
        args.extend_from_slice(extra);
        run(&args);
    };
    train(&["--iters", "4"]);
    let full = fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(parse_log(&full).unwrap().len(), 4);
    let weights = out.join("final.weights.fgc");
    assert_eq!(Checkpoint::load(&weights).unwrap().kind, Kind::Weights);

    // Resuming from the iteration-2 checkpoint rewrites the same tail.
    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let head: String = full.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(resumed.join("log.jsonl"), head).unwrap();
    run(&[
        "train", "--data", s(&data), "--seg-ckpt", s(&seg), "--out", s(&resumed), "--batch", "2",
        "--img-size", "16", "--seed", "1", "--config", s(&config), "--iters", "4",
        "--resume", s(&out.join("ckpt-0000002.fgc")),
    ]);
    assert_eq!(fs::read_to_string(resumed.join("log.jsonl")).unwrap(), full);

    let source = data.join("images/toy-00000.png");
    let reference = data.join("images/toy-00001.png");
    let parsed = dir.path().join("parsed.png");
    let generate = |name: &str, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut args = vec![
            "generate", "--ckpt", s(&weights), "--source", s(&source), "--domain", "female", "--seed", "5",
            "--out", s(&path),
        ];
        args.extend_from_slice(extra);
        run(&args);
        fs::read(path).unwrap()
    };
    let a = generate("a.png", &["--mode", "latent", "--mask-out", s(&parsed)]);
    assert_eq!(a, generate("b.png", &["--mode", "latent"]));
    assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
    generate("c.png", &["--mode", "reference", "--reference", s(&reference)]);
    generate("d.png", &["--mode", "latent", "--mask", s(&parsed), "--masked-attributes", "eyes,mouth"]);

    let missing = Command::new(env!("CARGO_BIN_EXE_facialgan"))
        .args([
            "generate", "--ckpt", s(&weights), "--source", s(&source), "--mode", "reference", "--domain", "male",
            "--out", s(&dir.path().join("e.png")),
        ])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("MissingReference"));

    let report = dir.path().join("report.json");
    run(&[
        "eval", "--ckpt", s(&weights), "--data", s(&data), "--metrics", "fid,seg-acc,identity", "--split",
        "train", "--out", s(&report),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["fid"]["extractor"], "FID-seg/v1");
    assert!(v["identity"]["value"].as_f64().unwrap() >= 0.0);
    assert!(v["seg-acc.all"]["n"].as_u64().unwrap() > 0);
}
