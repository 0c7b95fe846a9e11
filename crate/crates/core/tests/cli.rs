use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[model]
example = "1a"
speeds = [0.1, 0.5, 1.0]
sigma2 = 0.5
delta = 0.5
horizon = 12

[costs]
alpha = 4.0
beta = 1.0
gamma = 1.5

[quantization]
size = 8
clvq_samples = 10000
lloyd_samples = 3000
lloyd_iterations = 20
transition_samples = 10000

[belief]
size = 12
chains = 2000

[bench]
runs = 100
alpha = [3.0, 6.0]
methods = ["ma:3:2", "kf:cal", "quantized:12"]
"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pdmp-cpd"))
        .args(args)
        .arg("--config")
        .arg(dir.join("c.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();

    ok(d, &["simulate", "--runs", "3"]);
    let sims = std::fs::read_to_string(d.join("out/simulations.csv")).unwrap();
    assert_eq!(sims.lines().count(), 1 + 3 * 13);
    let obs: String = sims.lines().skip(1).filter(|l| l.starts_with("0,")).map(|l| format!("{}\n", l.split(',').nth(5).unwrap())).collect();
    std::fs::write(d.join("obs.csv"), obs).unwrap();

    ok(d, &["quantize"]);
    for f in ["states.bin", "beliefs.bin", "grids.csv", "transitions.csv"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    assert!(ok(d, &["solve"]).starts_with("v̂'_0 = "));
    let obs_path = d.join("obs.csv");
    let obs_arg = obs_path.to_str().unwrap();
    let first = ok(d, &["run-policy", "--obs", obs_arg]);
    assert_eq!(first, ok(d, &["run-policy", "--obs", obs_arg]));
    let eval = ok(d, &["evaluate", "--runs", "50"]);
    assert!(eval.starts_with("runs,mean_cost"));
    assert!(ok(d, &["baseline", "ma", "--obs", obs_arg]).starts_with("ma(k=3,s=2): "));
    assert!(ok(d, &["baseline", "kalman", "--obs", obs_arg, "--threshold", "0.9"]).starts_with("kf(0.9): "));
    assert!(ok(d, &["bounds"]).contains("n,a_n,b_n"));

    ok(d, &["bench"]);
    let csv = std::fs::read_to_string(d.join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    ok(d, &["bench", "--no-train"]);
    assert_eq!(csv, std::fs::read_to_string(d.join("out/results.csv")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["config"]["bench"]["runs"], 100);
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();
    let out = cli(d, &["bench", "--no-train", "--cache", d.join("empty").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing cached artifacts") && err.contains("omega-"), "{err}");

    let out = cli(d, &["solve"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `quantize` first"));

    std::fs::write(d.join("c.toml"), CONFIG.replace("\"1a\"", "\"9z\"")).unwrap();
    assert!(!cli(d, &["bounds"]).status.success());
}
