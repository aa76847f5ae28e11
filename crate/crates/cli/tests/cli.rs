use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use wcond::io::{read_matrix, write_matrix};
use wcond::linalg::{random_matrix, Distribution};
use wcond::spectral::layer_report;
use wcond::Matrix;

fn wcond(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wcond")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn lora_train_respects_entropy_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("lora");
    let out = wcond(&["train", "--method", "lora", "--rank", "4", "--seeds", "1,2,3", "--steps", "60", "--out", p(&stem)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("lora.json"));
    assert_eq!(report["seeds"], serde_json::json!([1, 2, 3]));
    let runs = report["results"]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for run in runs {
        assert!(run["summary"]["svd_entropy_nats"].as_f64().unwrap() <= 4f64.ln() + 1e-9);
        assert_eq!(run["loss_trajectory"].as_array().unwrap().len(), 60);
    }
    // ΔW files feed the analyzer directly.
    let delta = read_matrix(dir.path().join("lora_seed2_delta.mtx")).unwrap();
    let analyzed = wcond(&["analyze", "--manifest", p(&dir.path().join("lora_manifest.json"))]);
    assert_eq!(code(&analyzed), 0);
    let report: Value = serde_json::from_slice(&analyzed.stdout).unwrap();
    let direct = layer_report("seed2", &delta).unwrap();
    let layer = &report["results"]["layers"][1];
    assert_eq!(layer["layer_name"], "seed2");
    assert!((layer["svd_entropy_nats"].as_f64().unwrap() - direct.svd_entropy_nats.unwrap()).abs() <= 1e-12);
}

#[test]
fn sora_report_echoes_resolved_step_size() {
    let out = wcond(&["train", "--method", "sora", "--epsilon", "0.01", "--steps", "20", "--m", "16", "--n", "12", "--samples", "40"]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let sp = report["results"]["runs"][0]["summary"]["resolved_sp"].as_f64().unwrap();
    assert!(sp > 0.0 && sp < 1.0);
    assert_eq!(report["results"]["adapter"]["sp_policy"]["value"], 0.01);
}

#[test]
fn reruns_are_identical_except_wall_time() {
    let args = ["train", "--method", "prediag", "--steps", "30", "--m", "12", "--n", "10", "--samples", "30", "--seeds", "5,6"];
    let strip = |o: Output| {
        let mut v: Value = serde_json::from_slice(&o.stdout).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_s");
        v
    };
    assert_eq!(strip(wcond(&args)), strip(wcond(&args)));
}

#[test]
fn divergence_exits_3_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("div");
    let out = wcond(&["train", "--method", "lora", "--optimizer", "sgd", "--lr", "1e6", "--seeds", "0,9", "--out", p(&stem)]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed 0") && err.contains("step"), "{err}");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn identical_checkpoints_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_matrix(dir.path().join("w.mtx"), &Matrix::identity(5)).unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(
        &manifest,
        r#"{"layers":[{"name":"a","before_path":"w.mtx","after_path":"w.mtx"},{"name":"b","before_path":"w.mtx","after_path":"w.mtx"}],"metadata":{}}"#,
    )
    .unwrap();
    let out = wcond(&["analyze", "--manifest", p(&manifest), "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&out), 2);
    let report = read_json(&dir.path().join("r.json"));
    let layers = report["results"]["layers"].as_array().unwrap();
    assert!(layers.iter().all(|l| l["degenerate"] == true));
}

#[test]
fn analyze_csv_mirrors_json_and_library() {
    let dir = tempfile::tempdir().unwrap();
    let gauss = Distribution::Gaussian { mean: 0.0, std: 1.0 };
    let before = random_matrix(9, 6, gauss, 1).unwrap();
    let after = random_matrix(9, 6, gauss, 2).unwrap();
    write_matrix(dir.path().join("b.mtx"), &before).unwrap();
    write_matrix(dir.path().join("a.mtx"), &after).unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, r#"{"layers":[{"name":"attn.q","before_path":"b.mtx","after_path":"a.mtx"}],"metadata":{}}"#).unwrap();
    let stem = dir.path().join("r");
    assert_eq!(code(&wcond(&["analyze", "--manifest", p(&manifest), "--out", p(&stem)])), 0);

    let direct = layer_report("attn.q", &after.sub(&before).unwrap()).unwrap();
    let json = read_json(&dir.path().join("r.json"));
    let layer = &json["results"]["layers"][0];
    assert_eq!(layer["stable_rank"].as_f64().unwrap(), direct.stable_rank.unwrap());
    assert_eq!(layer["svd_entropy_nats"].as_f64().unwrap(), direct.svd_entropy_nats.unwrap());

    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "layer,stable_rank,svd_entropy_nats,sigma_max,num_sv");
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[0], "attn.q");
    assert_eq!(fields[1].parse::<f64>().unwrap(), layer["stable_rank"].as_f64().unwrap());
    assert_eq!(fields[2].parse::<f64>().unwrap(), layer["svd_entropy_nats"].as_f64().unwrap());
    assert_eq!(fields[3].parse::<f64>().unwrap(), layer["sigma_max"].as_f64().unwrap());
    assert_eq!(fields[4].parse::<usize>().unwrap(), 6);
}

#[test]
fn analyze_missing_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, r#"{"layers":[{"name":"x","before_path":"gone.mtx"}],"metadata":{}}"#).unwrap();
    assert_eq!(code(&wcond(&["analyze", "--manifest", p(&manifest)])), 1);
    assert_eq!(code(&wcond(&["analyze", "--manifest", p(&dir.path().join("none.json"))])), 1);
}

#[test]
fn verifiers_pass() {
    let out = wcond(&["verify", "theorem1", "--trials", "10000", "--seed", "42"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["results"]["nats"]["passes"], 10000);
    assert_eq!(v["results"]["base_invariant"], true);

    let out = wcond(&["verify", "equivalence", "--trials", "100"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["results"]["worst"].as_f64().unwrap() <= 1e-12);

    for which in ["theorem2", "expbound", "weyl"] {
        assert_eq!(code(&wcond(&["verify", which, "--trials", "50"])), 0, "{which}");
    }
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&wcond(&["verify", "theorem1", "--trials", "0"])), 64);
    assert_eq!(code(&wcond(&["verify", "nonsense"])), 64);
    assert_eq!(code(&wcond(&["train", "--method", "bogus"])), 64);
    assert_eq!(code(&wcond(&["train", "--method", "lora", "--rank", "100", "--m", "8", "--n", "8"])), 64);
    assert_eq!(code(&wcond(&["bench", "dora-forms", "--repeats", "3"])), 64);
    assert_eq!(code(&wcond(&[])), 64);
    assert_eq!(code(&wcond(&["--help"])), 0);
}

#[test]
fn bench_reports_share_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("b");
    let out = wcond(&["bench", "dora-forms", "--m", "64", "--n", "64", "--repeats", "10", "--out", p(&stem)]);
    assert_eq!(code(&out), 0);
    let small = read_json(&dir.path().join("b.json"));
    let out = wcond(&["bench", "rotation-reorder", "--m", "64", "--n", "64", "--repeats", "10"]);
    assert_eq!(code(&out), 0);
    let rot: Value = serde_json::from_slice(&out.stdout).unwrap();
    for v in [&small, &rot] {
        for key in ["command", "seeds", "results", "tool_version", "wall_time_s"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let cand = &v["results"]["pair"]["candidate"];
        for key in ["name", "sizes", "repeats", "warmup", "median_ns", "p10_ns", "p90_ns", "speedup_vs_baseline"] {
            assert!(cand.get(key).is_some(), "missing {key}");
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn rotation_bench_gate_at_1024() {
    let out = wcond(&["bench", "rotation-reorder", "--m", "1024", "--n", "1024", "--rotation-rank", "1", "--repeats", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["results"]["pair"]["speedup"].as_f64().unwrap() >= 3.0);
    assert_eq!(v["results"]["assertions"][0]["passed"], true);
}
