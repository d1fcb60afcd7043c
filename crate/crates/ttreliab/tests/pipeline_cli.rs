//! End-to-end exercise of the command-line pipeline on a deliberately tiny
//! configuration: dataset generation through transport-map importance
//! sampling and report aggregation, plus the exit-code contract.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ttreliab"))
}

/// Small but geometrically valid setup: the hole must span at least two
/// cells and the sensor ring (1.8 x hole radius) must stay inside the
/// plate.
const TINY_CONFIG: &str = r#"
seed = 7

[rve]
resolution = 8
n_records = 12

[surrogate]
epochs = 300
hidden = [16, 16]
learning_rate = 1e-3

[fields]
modes_per_field = 2

[plate]
refinement = 16
hole_radius = 26.0
calibration_samples = 64
calibration_target_pf = 0.02

[dirt]
n_nodes = 8
max_rank = 3
max_sweeps = 1
enrichment_rank = 1
n_probe = 30
max_layers = 2
indicator_levels = 2

[estimate]
n_samples = 300
n_bootstrap = 20
rejection_proposals = 500
rejection_batch = 128
"#;

fn run_ok(config: &Path, out: &Path, args: &[&str]) {
    let output = bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary should launch");
    assert!(
        output.status.success(),
        "`{}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn run_code(config: &Path, out: &Path, args: &[&str]) -> i32 {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary should launch")
        .status
        .code()
        .expect("process should exit normally")
}

#[test]
fn full_pipeline_on_tiny_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out = tmp.path().join("run");

    // Dependency errors name the producing command and exit with 3.
    assert_eq!(run_code(&config, &out, &["estimate", "--mode", "mc"]), 3);
    assert_eq!(run_code(&config, &out, &["train-surrogate"]), 3);

    run_ok(&config, &out, &["rve-data"]);
    assert!(out.join("dataset.txt").exists());

    run_ok(&config, &out, &["train-surrogate"]);
    assert!(out.join("surrogate.bin").exists());
    assert!(out.join("training.json").exists());

    run_ok(&config, &out, &["kl-build"]);
    run_ok(&config, &out, &["synthesize-truth"]);
    let truth: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("truth.json")).unwrap()).unwrap();
    assert!(truth["sigma_allow"].as_f64().unwrap() > 0.0);
    assert_eq!(truth["dim"].as_u64().unwrap(), 6);

    run_ok(&config, &out, &["validate-surrogate"]);

    // Estimation is deterministic: the same command yields byte-identical
    // reports on repeated invocations.
    run_ok(&config, &out, &["estimate", "--mode", "mc"]);
    let first = std::fs::read(out.join("report-prior-mc.json")).unwrap();
    run_ok(&config, &out, &["estimate", "--mode", "mc"]);
    let second = std::fs::read(out.join("report-prior-mc.json")).unwrap();
    assert_eq!(first, second);

    run_ok(&config, &out, &["build-map", "--kind", "prior-failure"]);
    assert!(out.join("map-prior-failure.bin").exists());
    run_ok(&config, &out, &["estimate", "--mode", "is-prior"]);

    run_ok(&config, &out, &["report"]);
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert!(table.starts_with("d,r,mode,p_hat,n_evals,cov\n"));
    assert_eq!(table.lines().count(), 3, "header plus two estimates:\n{table}");
    for line in table.lines().skip(1) {
        assert!(line.starts_with("6,3,"), "d=6, r=3 expected: {line}");
    }

    // A different configuration may not write into the same run directory.
    let other = tmp.path().join("other.toml");
    std::fs::write(&other, TINY_CONFIG.replace("seed = 7", "seed = 8")).unwrap();
    assert_eq!(run_code(&other, &out, &["rve-data"]), 2);
}

#[test]
fn invalid_configuration_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");

    let bad_toml = tmp.path().join("bad.toml");
    std::fs::write(&bad_toml, "seed = [this is not toml").unwrap();
    assert_eq!(run_code(&bad_toml, &out, &["rve-data"]), 2);

    let unknown_key = tmp.path().join("unknown.toml");
    std::fs::write(&unknown_key, "[rve]\nresolutoin = 32\n").unwrap();
    assert_eq!(run_code(&unknown_key, &out, &["rve-data"]), 2);

    let missing = tmp.path().join("does-not-exist.toml");
    assert_eq!(run_code(&missing, &out, &["rve-data"]), 2);
}
