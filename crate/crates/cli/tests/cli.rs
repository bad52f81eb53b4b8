use std::path::Path;
use std::process::{Command, Output};

fn volseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run volseg")
}

fn ok(args: &[&str]) -> String {
    let out = volseg(args);
    assert!(
        out.status.success(),
        "volseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_scene(dir: &Path) {
    ok(&["synth", "--out", p(dir), "--no-features", "--width", "16", "--height", "16"]);
}

const FAST: [&str; 4] = ["--samples-per-ray", "8", "--batch-size", "32"];

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = volseg(&["train", "--bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(!volseg(&["frobnicate"]).status.success());
}

#[test]
fn synth_train_render_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, run, renders) = (tmp.path().join("scene"), tmp.path().join("run"), tmp.path().join("renders"));
    small_scene(&scene);
    assert!(scene.join("manifest.json").exists());

    let mut args = vec!["train", "--scene", p(&scene), "--out", p(&run), "--iterations", "6", "--log-every", "3"];
    args.extend(FAST);
    ok(&args);
    let ckpt = run.join("checkpoint.vsck");
    assert!(ckpt.exists());
    let jsonl = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("round,iteration"));

    ok(&["render", "--scene", p(&scene), "--checkpoint", p(&ckpt), "--out", p(&renders), "--frames", "0,1"]);
    for sub in ["color", "depth", "features", "segmentation"] {
        assert_eq!(std::fs::read_dir(renders.join(sub)).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count(), 2, "{sub}");
    }

    let labels = scene.join("labels");
    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--pred", p(&labels), "--ref", p(&labels)])).unwrap();
    assert_eq!(report["miou"], 1.0);

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--scene", p(&scene), "--checkpoint", p(&ckpt)])).unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
}

#[test]
fn config_file_with_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    small_scene(&scene);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"iterations": 4, "log_every": 2, "samples_per_ray": 8, "batch_size": 32}}"#,
    )
    .unwrap();
    let run = tmp.path().join("a");
    ok(&["train", "--config", p(&cfg), "--scene", p(&scene), "--out", p(&run)]);
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["samples_per_ray"], 8);

    let run = tmp.path().join("b");
    ok(&["train", "--config", p(&cfg), "--scene", p(&scene), "--out", p(&run), "--iterations", "2"]);
    let last = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(last.lines().last().unwrap()).unwrap();
    assert_eq!(last["iteration"], 2);

    std::fs::write(&cfg, "{not json").unwrap();
    assert!(!volseg(&["train", "--config", p(&cfg), "--scene", p(&scene)]).status.success());
}

#[test]
fn hitl_with_zero_rounds_logs_only_pretraining() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, out) = (tmp.path().join("scene"), tmp.path().join("hitl"));
    small_scene(&scene);
    let mut args = vec!["hitl", "--scene", p(&scene), "--out", p(&out), "--rounds", "0", "--pretrain", "3"];
    args.extend(FAST);
    ok(&args);
    let jsonl = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(rec["round"], 0);
    assert_eq!(rec["iteration"], 3);
    assert_eq!(rec["labels"], 0);
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn missing_scene_is_a_clean_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = volseg(&["train", "--scene", p(&tmp.path().join("nope"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
