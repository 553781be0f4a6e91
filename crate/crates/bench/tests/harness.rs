use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use tinyvad_bench::config::ExperimentConfig;
use tinyvad_bench::grid::{run, Phase, RunOptions};
use tinyvad_bench::report::{read_rows, BenchmarkRow, Status, FIG_LAYER_GROUPS, FIG_PERFORMANCE, RESOURCES_CSV, RESULTS_CSV, RESULTS_JSON};
use tinyvad_core::backbone::{BackboneSpec, LayerGroup};
use tinyvad_core::resources::layer_macs;

fn category(name: &str, seed: u64, texture: Value) -> Value {
    json!({
        "name": name,
        "image_hw": [32, 32],
        "texture": texture,
        "colors": [[0.2, 0.3, 0.3], [0.7, 0.6, 0.5]],
        "anomaly": {"kind": "contrast_blob", "size_fraction": 0.05, "count": [1, 1]},
        "n_train": 6,
        "n_test_good": 2,
        "n_test_bad": 3,
        "seed": seed
    })
}

fn small_config(categories: Vec<Value>) -> Value {
    json!({
        "methods": ["stfpm", "paste"],
        "layer_groups": ["equiv", "paste"],
        "dataset": {"kind": "generated", "categories": categories},
        "teacher": {"images_per_class": 3, "image_size": 16, "pretrain": {"epochs": 2}},
        "fit": {"epochs": 2, "lr": 0.05},
        "membank": {"coreset_ratio": 0.5}
    })
}

fn cfg(doc: Value, sets: &[&str]) -> ExperimentConfig {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_value(doc, &sets, None).unwrap()
}

fn opts(out: &Path, jobs: usize, resume: bool) -> RunOptions {
    RunOptions {
        out: out.to_path_buf(),
        jobs,
        resume,
        save_models: false,
    }
}

fn noise() -> Value {
    json!({"type": "value_noise", "cell": 8.0})
}

/// Rows with the timing column cleared.
fn untimed(rows: &[BenchmarkRow]) -> Vec<BenchmarkRow> {
    rows.iter().map(|r| BenchmarkRow { wall_time_s: 0.0, ..r.clone() }).collect()
}

#[test]
fn teacher_student_pair_satisfies_the_sharing_identities() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(small_config(vec![category("tile", 1, noise())]), &[]);
    let s = run(&c, Phase::Bench, &opts(dir.path(), 1, false)).unwrap();
    assert_eq!(s.rows.len(), 2);
    assert!(s.rows.iter().all(|r| r.status == Status::Ok), "{:?}", s.rows);
    let st = s.rows.iter().find(|r| r.method == "stfpm").unwrap();
    let pa = s.rows.iter().find(|r| r.method == "paste").unwrap();
    assert_eq!(pa.layer_group, "paste");
    assert!(pa.split > 0);

    // Same taps, STFPM vs shared prefix, from the per-layer MAC table.
    let spec = BackboneSpec::tiny_irnet8();
    let macs = layer_macs(&spec, (32, 32)).unwrap();
    let prefix: u64 = macs[..=pa.split].iter().map(|l| l.macs).sum();
    let taps: Vec<usize> = pa.taps.split('-').map(|t| t.parse().unwrap()).collect();
    let group = LayerGroup::new(tinyvad_core::backbone::GroupMode::Paste, taps, pa.split).unwrap();
    let same_taps = tinyvad_core::resources::method_resources(
        &tinyvad_core::resources::MethodConfig::stfpm(),
        &spec,
        &group,
        (32, 32),
    )
    .unwrap();
    assert_eq!(same_taps.inference_macs - pa.inference_macs.unwrap(), prefix);
    assert!(st.pixel_f1.unwrap() >= 0.0 && pa.pixel_auroc.unwrap() <= 1.0);
    for f in [RESULTS_CSV, RESULTS_JSON, RESOURCES_CSV, FIG_PERFORMANCE, FIG_LAYER_GROUPS] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn rerun_reuses_everything_and_reproduces_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(small_config(vec![category("tile", 1, noise())]), &["methods=[\"stfpm\",\"patchcore\"]"]);
    run(&c, Phase::Bench, &opts(dir.path(), 1, false)).unwrap();
    let files = [RESULTS_CSV, RESULTS_JSON, RESOURCES_CSV, FIG_PERFORMANCE, FIG_LAYER_GROUPS];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    let again = run(&c, Phase::Bench, &opts(dir.path(), 1, true)).unwrap();
    assert_eq!(again.computed, 0);
    assert_eq!(again.skipped, 2);
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after);
    let keys: std::collections::HashSet<_> = again.rows.iter().map(BenchmarkRow::key).collect();
    assert_eq!(keys.len(), again.rows.len());
}

#[test]
fn runs_are_deterministic_across_directories_and_jobs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(small_config(vec![category("tile", 1, noise()), category("grid", 2, noise())]), &["methods=[\"stfpm\",\"padim\"]"]);
    let ra = run(&c, Phase::Bench, &opts(a.path(), 1, false)).unwrap();
    let rb = run(&c, Phase::Bench, &opts(b.path(), 2, false)).unwrap();
    assert_eq!(ra.rows.len(), 4);
    assert_eq!(untimed(&ra.rows), untimed(&rb.rows));
    assert_eq!(untimed(&read_rows(&a.path().join(RESULTS_CSV)).unwrap()), untimed(&ra.rows));
}

#[test]
fn resources_do_not_depend_on_image_content() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let doc = |texture: Value, seed| small_config(vec![category("tile", seed, texture)]);
    let sets = ["methods=[\"stfpm\",\"paste\",\"patchcore\",\"padim\"]", "fit.epochs=1"];
    let ra = run(&cfg(doc(noise(), 1), &sets), Phase::Bench, &opts(a.path(), 1, false)).unwrap();
    let rb = run(&cfg(doc(json!({"type": "stripes", "period": 5.0, "angle_deg": 30.0}), 9), &sets), Phase::Bench, &opts(b.path(), 1, false)).unwrap();
    assert_eq!(ra.rows.len(), 4);
    for (x, y) in ra.rows.iter().zip(&rb.rows) {
        assert_eq!(
            (x.backbone_macs, x.scoring_macs, x.training_macs, x.param_bytes, x.bank_bytes, x.training_ram_bytes),
            (y.backbone_macs, y.scoring_macs, y.training_macs, y.param_bytes, y.bank_bytes, y.training_ram_bytes)
        );
    }
    assert_eq!(std::fs::read(a.path().join(RESOURCES_CSV)).unwrap(), std::fs::read(b.path().join(RESOURCES_CSV)).unwrap());
}

#[test]
fn a_failing_cell_does_not_abort_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(
        small_config(vec![category("tile", 1, noise())]),
        &["methods=[\"stfpm\",\"padim\"]", "membank.d=100000"],
    );
    let s = run(&c, Phase::Bench, &opts(dir.path(), 1, false)).unwrap();
    let padim = s.rows.iter().find(|r| r.method == "padim").unwrap();
    assert_eq!(padim.status, Status::Failed);
    assert!(padim.error.contains("PaDiM dimension"), "{}", padim.error);
    assert!(padim.pixel_f1.is_none());
    assert_eq!(s.rows.iter().find(|r| r.method == "stfpm").unwrap().status, Status::Ok);
    // Failed cells are retried on resume.
    let again = run(&c, Phase::Bench, &opts(dir.path(), 1, true)).unwrap();
    assert_eq!(again.computed, 1);
}

#[test]
fn train_then_eval_matches_bench() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(small_config(vec![category("tile", 1, noise())]), &["methods=[\"paste\",\"patchcore\",\"padim\"]"]);
    run(&c, Phase::Train, &opts(a.path(), 1, false)).unwrap();
    let eval = run(&c, Phase::Eval, &opts(a.path(), 1, false)).unwrap();
    let bench = run(&c, Phase::Bench, &opts(b.path(), 1, false)).unwrap();
    assert_eq!(untimed(&eval.rows), untimed(&bench.rows));
    assert!(eval.rows.iter().all(|r| r.status == Status::Ok));
    let missing = tempfile::tempdir().unwrap();
    let none = run(&c, Phase::Eval, &opts(missing.path(), 1, false)).unwrap();
    assert!(none.rows.iter().all(|r| r.status == Status::Failed));
}

fn tinyvad() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tinyvad"));
    c.env_remove("TINYVAD_SEED").env("RUST_LOG", "warn");
    c
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"methods": []}"#).unwrap();
    let out = tinyvad().args(["bench", "--config"]).arg(&bad).arg("--out").arg(root.join("never")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no methods"));
    assert!(!root.join("never").exists());

    let spec = root.join("cat.json");
    std::fs::write(&spec, category("tile", 3, noise()).to_string()).unwrap();
    let data = root.join("data");
    assert!(tinyvad().args(["generate", "--spec"]).arg(&spec).arg("--out").arg(&data).output().unwrap().status.success());
    assert!(data.join("tile/train/good").is_dir());

    let mut doc = small_config(vec![]);
    doc["dataset"] = json!({"kind": "mvtec", "root": data, "categories": ["tile"]});
    let cfg_path = root.join("exp.json");
    std::fs::write(&cfg_path, doc.to_string()).unwrap();
    let results = root.join("results");
    let out = tinyvad()
        .args(["bench", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&results)
        .args(["--jobs", "2", "--set", "fit.epochs=1"])
        .env("TINYVAD_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_rows(&results.join(RESULTS_CSV)).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.seed == 5 && r.status == Status::Ok && r.size_fraction.is_none()));

    let out = tinyvad().args(["compare", "--results"]).arg(&results).output().unwrap();
    assert!(out.status.success());
    assert!(results.join("compare_stfpm_vs_paste.csv").exists());

    let out = tinyvad()
        .args(["resources", "--backbone", "mobilenet_v2", "--method", "stfpm", "--group", "low", "--out"])
        .arg(root.join("res"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["method"], "stfpm");
    assert!(rep["inference_macs"].as_u64().unwrap() > 0);
    assert!(root.join("res").join(RESOURCES_CSV).exists());
}
