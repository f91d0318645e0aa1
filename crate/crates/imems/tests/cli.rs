//! Black-box tests of the CLI: the full synth -> train -> predict ->
//! evaluate pipeline, the codec commands, output files, and exit codes
//! (0 success, 2 usage, 1 runtime).

use std::path::Path;
use std::process::{Command, Output};

fn imems(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imems"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, expected: i32, what: &str) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(
        out.status.code(),
        Some(expected),
        "{what}: expected exit {expected}, stderr: {stderr}"
    );
}

fn path_str(p: &Path) -> String {
    p.to_str().expect("utf8 path").to_string()
}

/// Tiny dataset the pipeline tests share.
fn write_tiny_dataset(dir: &Path) -> String {
    let out = imems(&[
        "synth",
        "--out",
        &path_str(dir),
        "--num-labels",
        "2",
        "--width",
        "16",
        "--height",
        "16",
        "--train",
        "3",
        "--val",
        "1",
        "--test",
        "2",
        "--region-seeds",
        "4",
        "--seed",
        "3",
    ]);
    assert_code(&out, 0, "synth");
    path_str(&dir.join("manifest.json"))
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path_str(&path)
}

const TINY_CONFIG: &str = r#"{
    "method": "unet-c-single",
    "epochs": 2,
    "depth": 2,
    "base_filters": 2,
    "seed": 5
}"#;

#[test]
fn synth_train_predict_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let manifest = write_tiny_dataset(&data_dir);
    let config = write_config(tmp.path(), TINY_CONFIG);

    let run_dir = tmp.path().join("run");
    let out = imems(&[
        "train",
        "--manifest",
        &manifest,
        "--config",
        &config,
        "--out",
        &path_str(&run_dir),
    ]);
    assert_code(&out, 0, "train");
    assert!(run_dir.join("run.json").is_file(), "train records its run");
    assert!(run_dir.join("model.ckpt").is_file());
    let history = std::fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss\n"));
    assert_eq!(history.lines().count(), 3, "header + one line per epoch");
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["method"], "unet-c-single");
    assert_eq!(run["config"]["epochs"], 2);

    let pred_path = tmp.path().join("pred.png");
    let overlay_path = tmp.path().join("overlay.png");
    let out = imems(&[
        "predict",
        "--checkpoint",
        &path_str(&run_dir.join("model.ckpt")),
        "--image",
        &path_str(&data_dir.join("images/img_004.png")),
        "--out",
        &path_str(&pred_path),
        "--overlay",
        &path_str(&overlay_path),
    ]);
    assert_code(&out, 0, "predict");
    assert!(pred_path.is_file());
    assert!(overlay_path.is_file());

    let eval_dir = tmp.path().join("eval");
    let out = imems(&[
        "evaluate",
        "--manifest",
        &manifest,
        "--checkpoint",
        &path_str(&run_dir.join("model.ckpt")),
        "--out",
        &path_str(&eval_dir),
    ]);
    assert_code(&out, 0, "evaluate");
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("method,f_0,f_1,avg_f,accuracy\n"), "{metrics}");
    assert!(metrics.lines().nth(1).unwrap().starts_with("unet-c-single,"));
    // Test items are manifest indices 4 and 5.
    assert!(eval_dir.join("overlay_004.png").is_file());
    assert!(eval_dir.join("overlay_005.png").is_file());
}

#[test]
fn encode_then_decode_restores_the_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    write_tiny_dataset(&data_dir);
    let image = data_dir.join("images/img_000.png");
    let mask = data_dir.join("masks/mask_000.png");

    let stem = tmp.path().join("bundle/item");
    let out = imems(&[
        "encode",
        "--image",
        &path_str(&image),
        "--mask",
        &path_str(&mask),
        "--out",
        &path_str(&stem),
        "--num-labels",
        "2",
    ]);
    assert_code(&out, 0, "encode");
    assert!(stem.with_extension("").parent().unwrap().join("item.ch00.png").is_file());
    assert!(Path::new(&format!("{}.ch01.png", stem.display())).is_file());
    assert!(Path::new(&format!("{}.meta.json", stem.display())).is_file());

    let decoded = tmp.path().join("decoded.png");
    let recovered = tmp.path().join("recovered.png");
    let out = imems(&[
        "decode",
        "--bundle",
        &path_str(&stem),
        "--out",
        &path_str(&decoded),
        "--recover",
        &path_str(&recovered),
    ]);
    assert_code(&out, 0, "decode");

    let original = imems::io::load_mask(&mask, Some(2)).unwrap();
    let round_tripped = imems::io::load_mask(&decoded, Some(2)).unwrap();
    assert_eq!(original.labels(), round_tripped.labels());

    // Recovered intensity differs from the original gray only in the low bit.
    let rgb = imems::io::load_rgb(&image).unwrap();
    let gray = imems::embedding::to_grayscale(&rgb);
    let rec = imems::io::load_gray(&recovered).unwrap();
    for (a, b) in gray.data().iter().zip(rec.data()) {
        assert_eq!(a & !1, *b);
    }
}

#[test]
fn same_seed_runs_write_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_tiny_dataset(&tmp.path().join("data"));
    let config = write_config(tmp.path(), TINY_CONFIG);

    let run = |dir: &Path, seed: Option<&str>| {
        let mut args = vec![
            "train".to_string(),
            "--manifest".into(),
            manifest.clone(),
            "--config".into(),
            config.clone(),
            "--out".into(),
            path_str(dir),
        ];
        if let Some(s) = seed {
            args.push("--seed".into());
            args.push(s.into());
        }
        let out = Command::new(env!("CARGO_BIN_EXE_imems"))
            .args(&args)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
    };

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    run(&a, None);
    run(&b, None);
    run(&c, Some("11"));

    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "history.csv"), read(&b, "history.csv"));
    assert_eq!(read(&a, "model.ckpt"), read(&b, "model.ckpt"));
    assert_ne!(read(&a, "history.csv"), read(&c, "history.csv"));
}

#[test]
fn grid_search_writes_table_and_winner() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_tiny_dataset(&tmp.path().join("data"));
    let config = write_config(
        tmp.path(),
        r#"{"method": "unet-c-multi", "epochs": 1, "depth": 2, "base_filters": 2}"#,
    );

    let out_dir = tmp.path().join("grid");
    let out = imems(&[
        "grid-search",
        "--manifest",
        &manifest,
        "--config",
        &config,
        "--grid",
        "0.3:0.7:0.4",
        "--out",
        &path_str(&out_dir),
    ]);
    assert_code(&out, 0, "grid-search");
    let csv = std::fs::read_to_string(out_dir.join("grid.csv")).unwrap();
    assert!(csv.starts_with("lambda,f_0,f_1,avg_f,accuracy\n"), "{csv}");
    assert_eq!(csv.lines().count(), 3, "header + two grid points: {csv}");
    assert!(csv.contains("0.300000,"));
    assert!(csv.contains("0.700000,"));
    let best: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("best.json")).unwrap())
            .unwrap();
    assert!(best["lambda"] == 0.3 || best["lambda"] == 0.7);
}

#[test]
fn usage_problems_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_tiny_dataset(&tmp.path().join("data"));
    let good_config = write_config(tmp.path(), TINY_CONFIG);
    let out_dir = path_str(&tmp.path().join("out"));

    // Unknown flag (handled by the argument parser).
    let out = imems(&["train", "--bogus"]);
    assert_code(&out, 2, "unknown flag");

    // Missing manifest file.
    let out = imems(&[
        "train",
        "--manifest",
        "/nonexistent/manifest.json",
        "--config",
        &good_config,
        "--out",
        &out_dir,
    ]);
    assert_code(&out, 2, "missing manifest");

    // Config with an unknown key.
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"method": "imems", "epocs": 3}"#).unwrap();
    let out = imems(&[
        "train",
        "--manifest",
        &manifest,
        "--config",
        &path_str(&bad),
        "--out",
        &out_dir,
    ]);
    assert_code(&out, 2, "unknown config key");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epocs"), "names the bad key: {stderr}");

    // --fold against a fixed-split manifest.
    let out = imems(&[
        "train",
        "--manifest",
        &manifest,
        "--config",
        &good_config,
        "--out",
        &out_dir,
        "--fold",
        "0",
    ]);
    assert_code(&out, 2, "fold on fixed split");
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    // A corrupt checkpoint is a broken artifact, not a usage mistake.
    let garbage = tmp.path().join("model.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let data_dir = tmp.path().join("data");
    write_tiny_dataset(&data_dir);
    let out = imems(&[
        "predict",
        "--checkpoint",
        &path_str(&garbage),
        "--image",
        &path_str(&data_dir.join("images/img_000.png")),
        "--out",
        &path_str(&tmp.path().join("pred.png")),
    ]);
    assert_code(&out, 1, "corrupt checkpoint");
}
