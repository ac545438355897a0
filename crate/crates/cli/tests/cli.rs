use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn meshmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshmoe"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = meshmoe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> Value {
    let out = meshmoe(dir, args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should fail");
    serde_json::from_slice(&out.stderr).expect("stderr holds a JSON envelope")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

fn trace(dir: &Path, seed: &str) -> PathBuf {
    ok(
        dir,
        &[
            "--seed",
            seed,
            "gen-trace",
            "--model",
            "deepseek",
            "--layers",
            "2",
            "--batch",
            "48",
            "--iters",
            "2",
            "--skew",
            "1.2",
            "--affinity",
            "0.3",
        ],
    );
    dir.join("trace.jsonl")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_then_simulate_writes_heatmap_for_every_port() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t = trace(dir, "3");
    let common = ["--trace", s(&t), "--model", "deepseek", "--mesh", "2x3"];
    ok(
        dir,
        &[
            &["plan"],
            &common[..],
            &[
                "--strategy",
                "node-link",
                "--gamma",
                "1",
                "--mapping-budget",
                "10",
            ],
        ]
        .concat(),
    );
    let placement = dir.join("placement.json");
    let mapping = dir.join("mapping.json");
    let plan = read_json(&dir.join("placement_plan.json"));
    assert_eq!(plan["config"]["strategy"], "NODE_LINK_BALANCE");
    assert_eq!(plan["solve_reports"].as_array().unwrap().len(), 2);

    let sim_args = [
        "simulate",
        "--placement",
        s(&placement),
        "--mapping",
        s(&mapping),
        "--gamma",
        "1",
    ];
    ok(dir, &[&sim_args[..], &common[..]].concat());
    let rows = csv_rows(&dir.join("simulation_heatmap.csv"));
    assert_eq!(rows.len(), 2 * 3 * 4);
    let present = rows.iter().filter(|r| &r[4] == "1").count();
    assert_eq!(present, 2 * (2 * 2 + 3));

    let report = read_json(&dir.join("simulation.json"));
    assert_eq!(report["kind"], "simulation");
    assert_eq!(report["config"]["seed"], 0);
    assert_eq!(report["config"]["model"]["spec"]["hidden_size"], 2048);
    assert_eq!(report["config"]["mesh"]["link_bandwidth_bps"], 50e9);
    assert_eq!(report["evaluation"]["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn tp_normalizes_to_one_and_duplicates_match() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t = trace(dir, "5");
    ok(
        dir,
        &[
            "compare",
            "--trace",
            s(&t),
            "--model",
            "deepseek",
            "--mesh",
            "2x2",
            "--strategies",
            "tp,ep,ep",
            "--gamma",
            "1",
        ],
    );
    let report = read_json(&dir.join("compare.json"));
    let rows = report["cells"][0]["rows"].as_array().unwrap();
    assert_eq!(rows[0]["strategy"], "TP");
    assert_eq!(rows[0]["normalized_tbt"], 1.0);
    assert_eq!(rows[1], rows[2]);
    assert_eq!(csv_rows(&dir.join("compare_tbt.csv")).len(), 3);
    assert_eq!(csv_rows(&dir.join("compare_decomposed.csv")).len(), 3);
}

#[test]
fn compare_needs_two_strategies() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t = trace(dir, "1");
    let e = err(
        dir,
        &[
            "compare",
            "--trace",
            s(&t),
            "--model",
            "deepseek",
            "--strategies",
            "tp",
        ],
    );
    assert_eq!(e["error"]["kind"], "usage");
}

#[test]
fn mismatched_model_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t = trace(dir, "1");
    let e = err(
        dir,
        &[
            "plan",
            "--trace",
            s(&t),
            "--model",
            "mixtral",
            "--strategy",
            "ep",
        ],
    );
    assert!(e["error"]["message"].as_str().unwrap().contains("E=64"));
}

#[test]
fn bad_hardware_profile_yields_envelope() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t = trace(dir, "1");
    let e = err(
        dir,
        &[
            "calibrate",
            "--trace",
            s(&t),
            "--model",
            "deepseek",
            "--hw",
            "5GHz",
        ],
    );
    assert_eq!(e["error"]["kind"], "pipeline");
}

#[test]
fn report_rejects_empty_and_missing_inputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(err(dir, &["report"])["error"]["kind"], "usage");
    let e = err(dir, &["report", "a.json", "b.json"]);
    assert_eq!(e["error"]["kind"], "missing_inputs");
    assert_eq!(
        e["error"]["missing"],
        serde_json::json!(["a.json", "b.json"])
    );
}

#[test]
fn report_tables_follow_their_inputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t = trace(dir, "9");
    let common = [
        "--trace",
        s(&t),
        "--model",
        "deepseek",
        "--mesh",
        "2x2",
        "--hw",
        "5TF:50GBps:10ns",
    ];
    ok(
        dir,
        &[&["calibrate", "--samples", "12"], &common[..]].concat(),
    );
    ok(dir, &[&["plan", "--strategy", "ep"], &common[..]].concat());
    let placement = dir.join("placement.json");
    ok(
        dir,
        &[
            &[
                "dynamic-sim",
                "--placement",
                s(&placement),
                "--gamma",
                "1",
                "--max-broadcasts",
                "2",
            ],
            &common[..],
        ]
        .concat(),
    );
    ok(
        dir,
        &[
            &["simulate", "--placement", s(&placement), "--gamma", "1"],
            &common[..],
        ]
        .concat(),
    );

    let out = dir.join("bundle");
    let inputs = ["calibration.json", "dynamic.json", "simulation.json"].map(|f| dir.join(f));
    ok(
        &out,
        &["report", s(&inputs[0]), s(&inputs[1]), s(&inputs[2])],
    );
    assert_eq!(csv_rows(&out.join("gamma_scatter.csv")).len(), 12);
    assert_eq!(csv_rows(&dir.join("calibration.csv")).len(), 12);
    assert_eq!(csv_rows(&out.join("link_heatmap.csv")).len(), 2 * 2 * 4);
    assert_eq!(csv_rows(&out.join("node_loads.csv")).len(), 2 * 4);
    assert_eq!(csv_rows(&out.join("static_dynamic.csv")).len(), 2 * 2);
    assert!(!out.join("speedup.csv").exists());
}

#[test]
fn disabled_dynamic_matches_static() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t = trace(dir, "2");
    let common = [
        "--trace",
        s(&t),
        "--model",
        "deepseek",
        "--mesh",
        "2x2",
        "--hw",
        "5TF:50GBps:10ns",
    ];
    ok(dir, &[&["plan", "--strategy", "ep"], &common[..]].concat());
    let placement = dir.join("placement.json");
    ok(
        dir,
        &[
            &[
                "dynamic-sim",
                "--placement",
                s(&placement),
                "--gamma",
                "1",
                "--enable-dynamic",
                "off",
            ],
            &common[..],
        ]
        .concat(),
    );
    let report = read_json(&dir.join("dynamic.json"));
    assert_eq!(report["report"]["speedup"], 1.0);
    assert_eq!(report["config"]["params"]["policy"]["enabled"], false);
}

#[test]
fn runs_are_reproducible_from_the_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    let ta = std::fs::read(trace(a.path(), "11")).unwrap();
    let tb = std::fs::read(trace(b.path(), "11")).unwrap();
    let tc = std::fs::read(trace(c.path(), "12")).unwrap();
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
    let run = read_json(&a.path().join("trace.run.json"));
    assert_eq!(run["config"]["seed"], 11);
    assert_eq!(run["config"]["params"]["generator"]["skew"], 1.2);
}
