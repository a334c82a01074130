//! Manifest determinism acceptance: every experiment re-run from its
//! manifest must reproduce the deterministic artifacts byte for byte
//! (wall-clock timings live in a separate CSV and are exempt).

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_facelift-bsde")
}

/// Deterministic artifacts of a run directory: everything except timings.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        if name.starts_with("timings") {
            continue;
        }
        map.insert(name, std::fs::read(entry.path()).unwrap());
    }
    map
}

fn run(args: &[&str]) {
    let output = Command::new(bin()).args(args).output().unwrap();
    assert!(
        output.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
}

fn assert_rerun_identical(base: &Path, first_args: &[&str], subcommand: &str, label: &str) {
    let dir_a = base.join(format!("{label}_a"));
    let dir_b = base.join(format!("{label}_b"));
    let mut args_a: Vec<&str> = first_args.to_vec();
    let a_str = dir_a.to_str().unwrap().to_string();
    args_a.extend(["--out-dir", &a_str]);
    run(&args_a);

    let manifest = dir_a.join("manifest.json");
    let m_str = manifest.to_str().unwrap().to_string();
    let b_str = dir_b.to_str().unwrap().to_string();
    run(&[subcommand, "--config", &m_str, "--out-dir", &b_str]);

    let a = artifacts(&dir_a);
    let b = artifacts(&dir_b);
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>(),
        "{label}: artifact sets differ"
    );
    for (name, bytes) in &a {
        // the re-run's manifest records the other out_dir; everything else
        // must match bit for bit
        if name == "manifest.json" {
            continue;
        }
        assert_eq!(
            Some(bytes),
            b.get(name),
            "{label}: artifact {name} differs between run and manifest re-run"
        );
    }
    println!("criterion 10: PASS {label} manifest re-run bit-identical ({} artifacts)", a.len());
}

#[test]
fn criterion_10_manifest_reruns() {
    let base = std::env::temp_dir().join(format!("manifest-rerun-{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();

    // small-but-complete configs so the whole test stays in CI budgets
    let small = serde_json::json!({
        "experiment": "bsde-price",
        "steps": 2,
        "n_paths": 2000,
        "seed": 9,
        "n_runs": 2,
        "step_train": {
            "batch_size": 500,
            "max_iterations": 300,
            "eval_every": 100,
            "eval_batch": 400,
            "learning_rate": 0.001,
            "schedule": {"kind": "constant"},
            "adam": {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
            "early_stop_patience": 5,
            "weight_norm_bound": null
        },
        "facelift": {
            "eps_pen": 0.02,
            "rounds": 2,
            "box_lo": [], "box_hi": [],
            "hidden": [16, 16],
            "activation": "relu",
            "train": {
                "batch_size": 500,
                "max_iterations": 300,
                "eval_every": 100,
                "eval_batch": 400,
                "learning_rate": 0.005,
                "schedule": {"kind": "constant"},
                "adam": {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
                "early_stop_patience": 5,
                "weight_norm_bound": null
            },
            "n_eval": 1000,
            "literal_previous_term": false
        },
        "desk_scale": false
    });
    let cfg_path = base.join("small_bsde.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&small).unwrap()).unwrap();
    let cfg_str = cfg_path.to_str().unwrap().to_string();

    assert_rerun_identical(
        &base,
        &["bsde-price", "--config", &cfg_str],
        "bsde-price",
        "bsde",
    );
    assert_rerun_identical(
        &base,
        &["reference-price", "--seed", "5"],
        "reference-price",
        "refprice",
    );
    assert_rerun_identical(
        &base,
        &["oracle-dump", "--seed", "5"],
        "oracle-dump",
        "oracle",
    );
}

#[test]
fn validate_reports_diagnostics_with_exit_2() {
    let base = std::env::temp_dir().join(format!("validate-test-{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();
    let bad = base.join("bad.json");
    std::fs::write(&bad, r#"{"experiment": "no-such-thing", "dhat": -1.0}"#).unwrap();
    let output = Command::new(bin())
        .args(["validate", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("unknown experiment"), "stderr: {err}");
    assert!(err.contains("radius"), "stderr: {err}");

    let output = Command::new(bin()).arg("validate").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    // stdout is the resolved config, loadable as a config again
    let parsed: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(parsed["experiment"], "facelift-case2");
}
