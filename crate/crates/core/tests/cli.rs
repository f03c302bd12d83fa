use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cvlift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvlift")).args(args).output().unwrap()
}

fn write_json(path: &Path, v: &Value) -> String {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run(config: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    cvlift(&args)
}

fn small_bridge() -> Value {
    json!({"experiment": "bridge-linear", "seed": 5, "grid": {"n": 60}, "bridge": {"n_paths": 6, "horizon": 2.0}})
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(&dir.path().join("c.json"), &small_bridge());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &["--threads", "1"]).status.success());
    assert!(run(&cfg, &b, &["--threads", "2"]).status.success());
    let files = read_json(&a.join("manifest.json"))["files"].clone();
    let files: Vec<String> = serde_json::from_value(files).unwrap();
    assert!(files.iter().any(|f| f == "ensemble_paths.csv"));
    assert!(files.iter().any(|f| f == "ensemble_endpoints.csv"));
    for f in files.iter().filter(|f| *f != "manifest.json") {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["config"]["seed"], 5);
    assert_eq!(m["threads"], 1);
    assert!(m["version"].is_string() && m["runtime_seconds"].is_number());

    // The manifest alone reproduces the run.
    let echoed = write_json(&dir.path().join("echo.json"), &m["config"]);
    let c = dir.path().join("c");
    assert!(run(&echoed, &c, &[]).status.success());
    assert_eq!(std::fs::read(a.join("results.json")).unwrap(), std::fs::read(c.join("results.json")).unwrap());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(&dir.path().join("c.json"), &small_bridge());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--seed", "6"]).status.success());
    assert_eq!(read_json(&b.join("results.json"))["seed"], 6);
    assert_ne!(read_json(&a.join("results.json"))["values"], read_json(&b.join("results.json"))["values"]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = [
        json!({"experiment": "grid-spectrum", "colour": 1}),
        json!({"experiment": "grid-spectrum", "grid": {"n": 60, "m": 2}}),
        json!({"experiment": "no-such-thing"}),
        json!({"experiment": "grid-spectrum", "system": {"sigma": -1.0}}),
    ];
    for (k, v) in bad.iter().enumerate() {
        let cfg = write_json(&dir.path().join(format!("{k}.json")), v);
        let o = run(&cfg, &dir.path().join("out"), &[]);
        assert_eq!(o.status.code(), Some(2), "{v}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(cvlift(&["run", "--config", "/nonexistent/cfg.json"]).status.code(), Some(2));
    assert_eq!(cvlift(&["run"]).status.code(), Some(2));
}

#[test]
fn guided_transition_reports_both_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "experiment": "pB-guided",
        "grid": {"n": 60},
        "transition": {"horizon": 2.0, "n_t": 200, "mc_paths": 50, "guided_paths": 20}
    });
    let cfg = write_json(&dir.path().join("c.json"), &cfg);
    let out = dir.path().join("o");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = &read_json(&out.join("results.json"))["values"];
    for key in ["p_b_soc", "p_b_is", "cost_steps", "mc_cost_steps", "cost_ratio"] {
        assert!(v[key].is_number(), "{key}");
    }
}

#[test]
fn compare_against_results_and_references() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(&dir.path().join("c.json"), &json!({"experiment": "grid-spectrum", "grid": {"n": 60}}));
    let out = dir.path().join("o");
    assert!(run(&cfg, &out, &[]).status.success());
    let res = out.join("results.json");
    let r = res.to_str().unwrap();
    assert_eq!(cvlift(&["compare", "--a", r, "--b", r]).status.code(), Some(0));

    let reference = |lambda: f64, tol: f64| {
        json!({"experiment": "grid-spectrum", "fields": {"lambda_2": {"value": lambda, "rel_tol": tol}}})
    };
    let pass = write_json(&dir.path().join("pass.json"), &reference(-2.4e-3, 0.15));
    assert_eq!(cvlift(&["compare", "--a", r, "--b", &pass]).status.code(), Some(0));
    let fail = write_json(&dir.path().join("fail.json"), &reference(-2.4e-2, 0.15));
    assert_eq!(cvlift(&["compare", "--a", r, "--b", &fail]).status.code(), Some(4));

    let missing = json!({"experiment": "grid-spectrum", "fields": {"lambda_9": {"value": 1.0, "rel_tol": 0.1}}});
    let missing = write_json(&dir.path().join("missing.json"), &missing);
    assert_eq!(cvlift(&["compare", "--a", r, "--b", &missing]).status.code(), Some(4));

    let other = json!({"experiment": "koopman", "fields": {"lambda_2": {"value": -2.4e-3, "rel_tol": 0.15}}});
    let other = write_json(&dir.path().join("other.json"), &other);
    assert_eq!(cvlift(&["compare", "--a", r, "--b", &other]).status.code(), Some(4));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        cvlift::experiments::ExperimentConfig::load(&p).unwrap();
        n += 1;
    }
    assert_eq!(n, cvlift::experiments::ExperimentId::ALL.len());
}

#[test]
fn reference_bundle_is_well_formed() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../references");
    for entry in std::fs::read_dir(root).unwrap() {
        let doc = read_json(&entry.unwrap().path());
        let id: cvlift::experiments::ExperimentId = serde_json::from_value(doc["experiment"].clone()).unwrap();
        let fields: std::collections::BTreeMap<String, cvlift::experiments::ReferenceField> =
            serde_json::from_value(doc["fields"].clone()).unwrap();
        assert!(!fields.is_empty(), "{id}");
        for (name, f) in &fields {
            assert!(f.rel_tol > 0.0 && f.value.is_finite(), "{id}.{name}");
            assert!(matches!(f.provenance.as_deref(), Some("published" | "derived")), "{id}.{name}");
        }
    }
}
