//! End-to-end tests of the `dks` command-line interface.

use std::process::{Command, Output};

use dks::pln::{pln_const_invert, read_csv, write_csv, FeatureMap};
use dks::tensorio::{manifest_path, read_container};
use nalgebra::DMatrix;

fn dks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dks"))
        .args(args)
        .output()
        .expect("spawn dks binary")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| {
        panic!(
            "stderr is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

#[test]
fn transform_solves_depth_100_tanh() {
    let out = dks(&["transform", "--act", "tanh", "--depth", "100", "--zeta", "1.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    let alpha = doc["alpha"].as_f64().unwrap();
    assert!(
        (alpha.abs() - 0.090438).abs() <= 1e-3,
        "|alpha| = {}",
        alpha.abs()
    );
    assert!(doc["residuals"]["q_prime"].as_f64().unwrap().abs() <= 1e-8);
    assert!(doc["residuals"]["c_prime"].as_f64().unwrap().abs() <= 1e-8);
    let psi = doc["psi"].as_f64().unwrap();
    // Output values are rounded to 9 significant digits.
    assert!((psi - 1.5f64.powf(0.01)).abs() < 1e-7);
}

#[test]
fn map_eval_shows_deep_relu_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("relu.csv");
    let out = dks(&[
        "map-eval",
        "--act",
        "relu",
        "--depth",
        "100",
        "--grid",
        "41",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let _c_in: f64 = parts.next().unwrap().parse().unwrap();
        let c_out: f64 = parts.next().unwrap().parse().unwrap();
        assert!(
            (0.996..=1.0).contains(&c_out),
            "c_out = {c_out} escapes the collapse interval"
        );
        rows += 1;
    }
    assert_eq!(rows, 41);
    // Map statistics arrive as JSON on stderr.
    let doc = stderr_json(&out);
    assert!((doc["stats"]["c_prime_at_1"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn slope_inversion_is_self_consistent() {
    let out = dks(&[
        "slope",
        "--arch",
        "resnet_v2_modified",
        "--D",
        "101",
        "--w",
        "0.2236",
        "--zeta",
        "1.5",
        "--invert",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    let mu = doc["mu_at_psi_star"].as_f64().unwrap();
    assert!((mu - 1.5).abs() <= 1e-6, "mu(psi*) = {mu}");
    assert!(doc["psi_star"].as_f64().unwrap() > 1.0);
}

#[test]
fn init_writes_deterministic_containers() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    for p in [&p1, &p2] {
        let out = dks(&[
            "init",
            "--arch",
            "mlp",
            "--D",
            "2",
            "--width",
            "6",
            "--scheme",
            "suo-delta",
            "--seed",
            "5",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // Same seed, same architecture: bit-identical files.
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(manifest_path(&p1).exists());

    let tensors = read_container(&p1).unwrap();
    // mlp with D = 2 has three affine layers, each with weights and biases.
    assert_eq!(tensors.len(), 6);
    for t in &tensors {
        if t.name.ends_with(".weights") {
            assert_eq!(t.shape, vec![1, 1, 6, 6]);
            // 1x1 SUO-Delta weights form an orthonormal matrix.
            let w = DMatrix::from_row_slice(6, 6, &t.data);
            let err = (&w * w.transpose() - DMatrix::identity(6, 6))
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err <= 1e-10, "{}: orthogonality error {err}", t.name);
        } else {
            assert!(t.name.ends_with(".biases"));
            assert!(t.data.iter().all(|&b| b == 0.0));
        }
    }
}

#[test]
fn pln_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.csv");
    let output = dir.path().join("y.csv");
    let x = FeatureMap::new(DMatrix::from_row_slice(
        2,
        3,
        &[0.5, -1.25, 2.0, 1.0, 0.75, -0.5],
    ))
    .unwrap();
    std::fs::write(&input, write_csv(&x)).unwrap();
    let out = dks(&[
        "pln",
        "--in",
        input.to_str().unwrap(),
        "--const",
        "1.0",
        "--out",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let y = read_csv(&std::fs::read_to_string(&output).unwrap()).unwrap();
    assert_eq!(y.channels(), 3);
    let back = pln_const_invert(&y, 1.0).unwrap();
    let err = (&back.data - &x.data).abs().max();
    assert!(err <= 1e-10, "round-trip error {err}");
}

#[test]
fn verify_ntk_passes_for_solved_tanh() {
    let out = dks(&["verify", "ntk", "--act", "tanh", "--depth", "10", "--zeta", "1.05"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stderr_json(&out);
    assert_eq!(doc["pass"], serde_json::Value::Bool(true));
    assert!(doc["max_deviation"].as_f64().unwrap() <= doc["bound"].as_f64().unwrap());
}

#[test]
fn arch_validate_fails_on_bad_graph() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{
  "nodes": [
    {"id": "in", "kind": "input", "params": {"channels": 4}, "parents": []},
    {"id": "n", "kind": "nonlinear", "params": {"activation": "relu"}, "parents": ["in"]}
  ],
  "output": "n"
}"#,
    )
    .unwrap();
    let out = dks(&["arch-validate", "--arch", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let doc = stdout_json(&out);
    assert_eq!(doc["valid"], serde_json::Value::Bool(false));
    assert_eq!(doc["violations"].as_array().unwrap().len(), 1);
}

#[test]
fn arch_validate_accepts_template_and_propagates() {
    let out = dks(&[
        "arch-validate",
        "--arch",
        "mlp",
        "--D",
        "3",
        "--act",
        "tanh",
        "--propagate",
        "0.5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_eq!(doc["valid"], serde_json::Value::Bool(true));
    assert!(doc["states"]["out"]["q"].as_f64().unwrap() > 0.0);
}

#[test]
fn usage_errors_exit_with_code_2() {
    // Missing required --zeta.
    let out = dks(&["transform", "--act", "tanh", "--depth", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_with_code_1() {
    let out = dks(&["transform", "--act", "nope", "--depth", "10", "--zeta", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
