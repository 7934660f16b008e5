use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mixlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlink")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn describe_imagenet_preset_sizes() {
    let o = mixlink(&["describe", "--preset", "mixnet-105"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let sizes: Vec<&str> = out
        .lines()
        .filter(|l| l.starts_with("block"))
        .map(|l| l.split_whitespace().nth(3).unwrap())
        .collect();
    assert_eq!(sizes, ["56x56", "28x28", "14x14", "7x7"]);
    assert!(out.contains("L = 105"));
}

#[test]
fn describe_explicit_cifar_widths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"network": {"depth": 100, "k1": 12, "k2": 12}}"#);
    let o = mixlink(&["describe", "--config", &cfg, "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("stem,3x32x32,24x32x32,"));
    // θ = 1: 24 + 16·12 = 216, 216 + 192 = 408, 408 + 192 = 600
    assert!(out.contains("block1,24x32x32,216x32x32,16,"));
    assert!(out.contains("block3,408x8x8,600x8x8,16,"));

    let half = write_config(dir.path(), "h.json", r#"{"network": {"depth": 100, "compression": 0.5}}"#);
    let out = stdout(&mixlink(&["describe", "--config", &half, "--format", "csv"]));
    // 216 → 108 → 300 → 150 → 342
    assert!(out.contains("transition1,216x32x32,108x16x16,"));
    assert!(out.contains("block3,150x8x8,342x8x8,16,"));
}

#[test]
fn malformed_json_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{\n  \"network\": {\n    \"preset\": \n}\n");
    let o = mixlink(&["describe", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"train": {"epochz": 3}}"#);
    let o = mixlink(&["train-toy", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mixlink(&["describe", "--preset", "mixnet-7"]).status.code(), Some(2));
    assert_eq!(mixlink(&["gradcheck", "--op", "nope"]).status.code(), Some(2));
    assert_eq!(mixlink(&["verify-topology", "--arch", "4"]).status.code(), Some(2));
    assert_eq!(mixlink(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn count_params_grid_for_one_preset() {
    let o = mixlink(&["count-params", "--preset", "mixnet-100", "--grid"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.contains("mixnet-100")).count(), 6);
    assert!(out.contains("1.5M"));
    assert!(out.contains("selected m = "));
}

#[test]
fn count_params_full_grid_selects_a_setting() {
    let o = mixlink(&["count-params", "--grid", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sel = v["selected"].as_u64().expect("a setting matches all presets") as usize;
    let cell = &v["cells"][sel];
    assert_eq!(cell["multiplier"], 4);
    assert_eq!(cell["compression"], 0.5);
    assert_eq!(cell["entries"].as_array().unwrap().len(), 6);
}

#[test]
fn count_params_reports_reference() {
    let o = mixlink(&["count-params", "--preset", "mixnet-141"]);
    assert!(stdout(&o).contains("published 41.07M"));
    let o = mixlink(&["count-params", "--preset", "mixnet-141", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["reference"]["reference"], 41.07);
    let rows = v["rows"].as_array().unwrap();
    let sum: u64 = rows.iter().map(|r| r["params"].as_u64().unwrap()).sum();
    assert_eq!(sum, v["total_params"].as_u64().unwrap());
}

#[test]
fn csv_is_byte_stable() {
    let a = mixlink(&["count-params", "--preset", "mixnet-250", "--format", "csv"]);
    let b = mixlink(&["count-params", "--preset", "mixnet-250", "--format", "csv"]);
    assert_eq!(a.stdout, b.stdout);
    let g1 = mixlink(&["count-params", "--grid", "--format", "csv"]);
    let g2 = mixlink(&["count-params", "--grid", "--format", "csv"]);
    assert_eq!(g1.stdout, g2.stdout);
}

#[test]
fn describe_agrees_with_count_params() {
    for preset in ["mixnet-100", "mixnet-121"] {
        let d = stdout(&mixlink(&["describe", "--preset", preset, "--format", "csv"]));
        let c = stdout(&mixlink(&["count-params", "--preset", preset, "--format", "csv"]));
        let rows: Vec<Vec<&str>> = c.lines().skip(1).map(|l| l.split(',').collect()).collect();
        for line in d.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let stage_rows: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0].split('.').next() == Some(f[0])).collect();
            assert_eq!(f[1], stage_rows.first().unwrap()[2], "{preset} {line}");
            assert_eq!(f[2], stage_rows.last().unwrap()[3], "{preset} {line}");
            let params: u64 = stage_rows.iter().map(|r| r[4].parse::<u64>().unwrap()).sum();
            assert_eq!(f[4].parse::<u64>().unwrap(), params);
        }
    }
}

#[test]
fn verify_topology_default_passes() {
    let o = mixlink(&["verify-topology"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    for suite in ["unrolling", "reduction", "width", "witness"] {
        assert!(out.lines().any(|l| l.starts_with(suite) && l.contains("PASS")), "{out}");
    }
    let dev: f64 = out
        .lines()
        .find(|l| l.starts_with("unrolling"))
        .and_then(|l| l.split("max_deviation=").nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(dev <= 1e-10);
}

#[test]
fn verify_topology_single_suite() {
    let o = mixlink(&["verify-topology", "--suite", "reduction", "--arch", "2", "--trials", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.contains("trials=")).count(), 1);
    assert!(out.contains("reduction  PASS trials=10"));
}

#[test]
fn injected_offset_bug_names_locality() {
    let o = mixlink(&["verify-topology", "--suite", "witness", "--inject-bug", "offset", "--trials", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("invariant `locality` violated"));
    assert!(stderr(&o).contains("locality"));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn gradcheck_runs_and_selects() {
    let o = mixlink(&["gradcheck", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("mixed_block") && out.contains("overall PASS"));
    let o = mixlink(&["gradcheck", "--op", "conv2d", "--trials", "20", "--dtype", "32bit", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["tolerance"], 1e-2);
    assert_eq!(v["dtype"], "32bit");
    assert_eq!(v["ops"].as_array().unwrap().len(), 1);
    assert_eq!(v["ops"][0]["trials"], 20);
}

#[test]
fn train_toy_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = mixlink(&["train-toy", "--seed", "7", "--epochs", "2", "--output", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("seed=7"));
    }
    let (a, b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("epoch,lr,loss,train_acc,test_acc\n"));
}

#[test]
fn train_toy_position_ablation_pairs_curves() {
    let o = mixlink(&["train-toy", "--ablate", "position", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("variant,epoch,lr,loss,train_acc,test_acc\n"));
    assert!(out.contains("\nfixed,0,") && out.contains("\nunfixed,0,"));
    let summary = stderr(&o);
    let params: Vec<&str> = summary.lines().map(|l| l.split_whitespace().find(|w| w.starts_with("params=")).unwrap()).collect();
    assert_eq!(params.len(), 2);
    assert_eq!(params[0], params[1]);
}

#[test]
fn zero_learning_rate_gives_constant_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "z.json", r#"{"train": {"lr": 0.0, "epochs": 3}}"#);
    let o = mixlink(&["train-toy", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r == &rows[0]), "{out}");
}

#[test]
fn divergence_exits_1_with_partial_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.json", r#"{"train": {"lr": 1e300, "epochs": 3}}"#);
    let csv = dir.path().join("h.csv");
    let o = mixlink(&["train-toy", "--config", &cfg, "--output", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("diverged"));
    assert!(fs::read_to_string(&csv).unwrap().starts_with("epoch,lr,loss"));
}

#[test]
fn documented_example_configs_load() {
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/configs");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_mixlink")).args(args).current_dir(dir.path()).output().unwrap();
    for name in ["describe", "count-params", "verify-topology", "gradcheck", "train-toy"] {
        let cfg = docs.join(format!("{name}.json"));
        let o = run(&["describe", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
    }
    let o = run(&["count-params", "--config", docs.join("count-params.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("mixnet-190.csv")).unwrap();
    assert!(csv.starts_with("name,kind,input,output,params,flops\n"));
}

#[test]
fn dropout_flag_changes_the_run() {
    let plain = mixlink(&["train-toy", "--epochs", "1"]);
    let dropped = mixlink(&["train-toy", "--epochs", "1", "--dropout"]);
    assert_eq!(dropped.status.code(), Some(0), "{}", stderr(&dropped));
    assert_ne!(plain.stdout, dropped.stdout);
}
