use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[pipeline]
warm_rings = 1

[pipeline.control]
background = 8

[pipeline.solver]
max_iters = 200

[pipeline.refine]
steps = 1

[pipeline.refine.solver]
max_iters = 100
"#;

fn femseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_femseg"))
        .current_dir(dir)
        .args(["--config", "run.toml", "--out", "out"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn gen_solve_refine_extract_eval() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(&femseg(dir.path(), &["gen"]));
    assert!(fs::read_to_string(dir.path().join("out/scene/gt.pgm"))
        .unwrap()
        .starts_with("P2"));
    assert!(ok(&femseg(dir.path(), &["solve"])).starts_with("solve: overall"));
    ok(&femseg(dir.path(), &["refine"]));
    let steps = fs::read_to_string(dir.path().join("out/refine/steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 2);
    ok(&femseg(dir.path(), &["extract"]));
    assert!(fs::read_to_string(dir.path().join("out/extract/interfaces.svg"))
        .unwrap()
        .contains("<svg"));
    let eval = ok(&femseg(dir.path(), &["eval"]));
    let refine: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/refine/summary.json")).unwrap()).unwrap();
    let overall = refine["accuracy"]["overall"].as_f64().unwrap();
    assert!(eval.contains(&format!("overall {overall:.4}")), "{eval}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(&femseg(dir.path(), &["solve"]));
    let first = fs::read(dir.path().join("out/solve/trace.csv")).unwrap();
    let state = fs::read(dir.path().join("out/solve/state.json")).unwrap();
    ok(&femseg(dir.path(), &["solve"]));
    assert_eq!(first, fs::read(dir.path().join("out/solve/trace.csv")).unwrap());
    assert_eq!(state, fs::read(dir.path().join("out/solve/state.json")).unwrap());
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let out = femseg(dir.path(), &["--flavor", "q2", "solve"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("q2"));
    fs::write(dir.path().join("run.toml"), "[pipeline]\nweight = \"heavy\"\n").unwrap();
    let out = femseg(dir.path(), &["gen"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.toml"));
    let out = femseg(dir.path(), &["extract", "--input", "missing.json"]);
    assert!(!out.status.success());
}
