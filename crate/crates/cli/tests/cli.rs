use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clusterseg_cli::config::RunConfig;
use clusterseg_cli::dataset::{
    read_dataset_manifest, seg_file, write_json, write_segmentation, SegEntry, SegManifest,
    FORMAT_VERSION, MANIFEST, SEGMENTATION_FORMAT,
};
use clusterseg_core::clustering::{Prediction, Segmentation};
use clusterseg_core::eval::EvalResult;
use clusterseg_core::scenegen::Scene;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clusterseg"));
    c.env_remove("CLUSTERSEG_JOBS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen", "--out", s(&out)];
    if !extra.contains(&"--res") {
        args.extend(["--res", "24x24"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn report(path: &Path) -> EvalResult {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_requested_frames_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "a", &["--count", "4", "--seed", "3"]);
    let b = gen(tmp.path(), "b", &["--count", "4", "--seed", "3"]);
    let files = dir_contents(&a);
    assert_eq!(files.keys().filter(|k| k.ends_with(".tsb")).count(), 4);
    assert_eq!(read_dataset_manifest(&a).unwrap().frames.len(), 4);
    assert_eq!(files, dir_contents(&b));
    let c = gen(tmp.path(), "c", &["--count", "4", "--seed", "4"]);
    assert_ne!(files, dir_contents(&c));
}

#[test]
fn fixed_object_count_is_respected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--count", "5", "--objects", "3..3"]);
    let m = read_dataset_manifest(&d).unwrap();
    for f in &m.frames {
        assert_eq!(f.objects, 3);
        let scene = Scene::from_json(&std::fs::read_to_string(d.join(&f.scene)).unwrap()).unwrap();
        assert_eq!(scene.num_objects(), 3);
    }
}

#[test]
fn oracle_and_bounded_noise_evaluate_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--count", "4"]);
    for (name, extra) in [
        ("oracle", vec!["--predictor", "oracle"]),
        (
            "ball",
            vec![
                "--predictor",
                "noisy",
                "--ball-factor",
                "0.49",
                "--seed",
                "5",
            ],
        ),
    ] {
        let segs = tmp.path().join(name);
        let mut args = vec!["infer", "--dataset", s(&d), "--out", s(&segs)];
        args.extend(extra);
        ok(&args);
        let rep = tmp.path().join(format!("{name}.json"));
        ok(&[
            "eval",
            "--dataset",
            s(&d),
            "--segs",
            s(&segs),
            "--report",
            s(&rep),
        ]);
        let r = report(&rep);
        assert_eq!((r.ap, r.ap50, r.ap75, r.ar), (1.0, 1.0, 1.0, 1.0), "{name}");
    }
}

#[test]
fn single_object_oracle_gives_an_all_ones_row() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--count", "3", "--objects", "1..1"]);
    let segs = tmp.path().join("segs");
    ok(&["infer", "--dataset", s(&d), "--out", s(&segs)]);
    let rep = tmp.path().join("r.json");
    let table = ok(&[
        "eval",
        "--dataset",
        s(&d),
        "--segs",
        s(&segs),
        "--report",
        s(&rep),
    ]);
    let r = report(&rep);
    let defined: Vec<f64> = r.values().into_iter().filter(|v| !v.is_nan()).collect();
    assert!(defined.len() >= 5);
    assert!(defined.iter().all(|&v| v == 1.0), "{defined:?}");
    assert!(table.contains("100.0"));

    let again = tmp.path().join("r2.json");
    ok(&[
        "eval",
        "--dataset",
        s(&d),
        "--segs",
        s(&segs),
        "--report",
        s(&again),
    ]);
    assert_eq!(std::fs::read(&rep).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn empty_predictions_score_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--count", "2"]);
    let segs = tmp.path().join("empty");
    std::fs::create_dir_all(&segs).unwrap();
    let manifest = read_dataset_manifest(&d).unwrap();
    let (h, w) = (manifest.generator.height, manifest.generator.width);
    for i in 0..2 {
        write_segmentation(
            &segs,
            i,
            &Segmentation::empty(h, w),
            &Prediction::zeros(h, w),
        )
        .unwrap();
    }
    let seg_manifest = SegManifest {
        format: SEGMENTATION_FORMAT.into(),
        version: FORMAT_VERSION,
        predictor: "none".into(),
        frames: (0..2)
            .map(|i| SegEntry {
                index: i,
                bundle: seg_file(i),
                instances: 0,
            })
            .collect(),
    };
    write_json(&segs.join(MANIFEST), &seg_manifest).unwrap();
    let rep = tmp.path().join("r.json");
    ok(&[
        "eval",
        "--dataset",
        s(&d),
        "--segs",
        s(&segs),
        "--report",
        s(&rep),
    ]);
    let r = report(&rep);
    assert_eq!((r.ap, r.ar, r.ar1, r.ar10), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn mismatched_counts_are_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d2 = gen(tmp.path(), "d2", &["--count", "2"]);
    let d3 = gen(tmp.path(), "d3", &["--count", "3"]);
    let segs = tmp.path().join("segs");
    ok(&["infer", "--dataset", s(&d2), "--out", s(&segs)]);
    assert_eq!(code(&["eval", "--dataset", s(&d3), "--segs", s(&segs)]), 2);
}

#[test]
fn noise_sweep_writes_one_row_per_level() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--count", "3"]);
    let csv = tmp.path().join("sweep.csv");
    ok(&[
        "infer",
        "--dataset",
        s(&d),
        "--predictor",
        "noisy",
        "--sweep-sigma",
        "0,0.02,0.5",
        "--sweep-out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sigma_xi,ap,ap50,ap75,ar");
    assert_eq!(lines.len(), 4);
    let rows: Vec<Vec<f64>> = lines[1..]
        .iter()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0], vec![0.0, 1.0, 1.0, 1.0, 1.0]);
    assert!(rows[2][1] < 1.0);
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let rep = tmp.path().join("g.json");
    assert_eq!(code(&["gradcheck", "--report", s(&rep)]), 0);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(v["checked"].as_u64().unwrap() >= 500);

    assert_eq!(
        code(&["gradcheck", "--lambda-vio", "0", "--report", s(&rep)]),
        0
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-6);

    assert_eq!(code(&["gradcheck", "--corrupt-scale", "1.01"]), 3);
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split(',').map(String::from))
                .collect()
        })
        .collect()
}

#[test]
fn train_applies_schedule_and_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--count", "6", "--res", "16x16"]);
    let full = tmp.path().join("full.ckpt");
    ok(&[
        "train",
        "--dataset",
        s(&d),
        "--epochs",
        "7",
        "--out",
        s(&full),
    ]);
    let rows = csv_rows(&full.with_extension("csv"));
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[5]["lambda_var"], "1");
    assert_eq!(
        (
            rows[6]["lambda_var"].as_str(),
            rows[6]["lambda_vio"].as_str()
        ),
        ("100", "100")
    );
    assert_eq!(rows[6]["epoch"], "6");

    let half = tmp.path().join("half.ckpt");
    ok(&[
        "train",
        "--dataset",
        s(&d),
        "--epochs",
        "4",
        "--out",
        s(&half),
    ]);
    let resumed = tmp.path().join("resumed.ckpt");
    ok(&[
        "train",
        "--dataset",
        s(&d),
        "--epochs",
        "7",
        "--resume",
        s(&half),
        "--out",
        s(&resumed),
    ]);
    let resumed_rows = csv_rows(&resumed.with_extension("csv"));
    assert_eq!(resumed_rows[..], rows[5..]);
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&resumed).unwrap()
    );
}

#[test]
fn mlp_inference_needs_a_readable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--count", "2", "--res", "16x16"]);
    let out = tmp.path().join("o");
    assert_eq!(
        code(&[
            "infer",
            "--dataset",
            s(&d),
            "--predictor",
            "mlp",
            "--out",
            s(&out)
        ]),
        1
    );
    let missing = tmp.path().join("missing.ckpt");
    assert_eq!(
        code(&[
            "infer",
            "--dataset",
            s(&d),
            "--predictor",
            "mlp",
            "--model",
            s(&missing),
            "--out",
            s(&out)
        ]),
        2
    );
    let model = tmp.path().join("m.ckpt");
    ok(&[
        "train",
        "--dataset",
        s(&d),
        "--epochs",
        "1",
        "--out",
        s(&model),
    ]);
    ok(&[
        "infer",
        "--dataset",
        s(&d),
        "--predictor",
        "mlp",
        "--model",
        s(&model),
        "--out",
        s(&out),
    ]);
    assert_eq!(dir_contents(&out).len(), 3);
}

#[test]
fn config_file_and_flags_layer_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"seed": 9, "count": 2, "generator": {"width": 20, "height": 20, "focal": 20.0}}"#,
    )
    .unwrap();
    let d = tmp.path().join("d");
    ok(&[
        "gen",
        "--config",
        s(&cfg_path),
        "--out",
        s(&d),
        "--count",
        "3",
    ]);
    let m = read_dataset_manifest(&d).unwrap();
    assert_eq!((m.seed, m.frames.len(), m.generator.width), (9, 3, 20));

    let printed = ok(&["config", "--config", s(&cfg_path)]);
    let resolved = RunConfig::from_json(&printed).unwrap();
    assert_eq!(resolved.seed, 9);
    let saved = tmp.path().join("saved.json");
    ok(&["config", "--config", s(&cfg_path), "--out", s(&saved)]);
    assert_eq!(ok(&["config", "--config", s(&saved)]), printed);
    assert_eq!(
        RunConfig::from_json(&ok(&["config"])).unwrap(),
        RunConfig::default()
    );
}

#[test]
fn jobs_setting_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&[
        "gen",
        "--out",
        s(&a),
        "--count",
        "5",
        "--res",
        "24x24",
        "--jobs",
        "1",
    ]);
    let out = bin()
        .args(["gen", "--out", s(&b), "--count", "5", "--res", "24x24"])
        .env("CLUSTERSEG_JOBS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn help_documents_defaults() {
    let train = ok(&["train", "--help"]);
    for needle in [
        "[default: 30]",
        "[default: 4]",
        "[default: 0.0001]",
        "[default: 0]",
    ] {
        assert!(train.contains(needle), "{needle}");
    }
    let gen = ok(&["gen", "--help"]);
    for needle in [
        "[default: 64x64]",
        "[default: 2..6]",
        "[default: 0.2]",
        "[default: 8]",
    ] {
        assert!(gen.contains(needle), "{needle}");
    }
    let gc = ok(&["gradcheck", "--help"]);
    for needle in ["[default: 500]", "[default: 0.00001]", "[default: 8]"] {
        assert!(gc.contains(needle), "{needle}");
    }
    assert!(!gc.contains("corrupt"));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen", "--out", s(&out), "--fraction", "0.5"]), 1);
    assert_eq!(code(&["gen", "--out", s(&out), "--res", "big"]), 1);
    assert_eq!(code(&["gen", "--out", s(&out), "--count", "0"]), 1);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"unknown": 1}"#).unwrap();
    assert_eq!(code(&["config", "--config", s(&bad)]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn unwritable_output_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("file");
    std::fs::write(&file, b"x").unwrap();
    let inside = file.join("sub");
    assert_eq!(code(&["gen", "--out", s(&inside), "--count", "1"]), 2);
}
