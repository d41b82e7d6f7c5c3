//! Integration tests for the desk-scale network verification harness:
//! kernel approximation, empirical q preservation, and the per-layer NTK.

use dks::activations::{registry_get, transform, ActivationSpec};
use dks::init::rng_from_seed;
use dks::localmaps::local_c;
use dks::netverify::{build_dense, empirical_qc, ntk_per_layer, InitScheme};
use dks::solver::{solve_transform, SolveOptions};
use nalgebra::DVector;
use rand::Rng as _;

fn normalized_inputs(width: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|_| {
            let mut v = DVector::from_fn(width, |_, _| rng.gen_range(-1.0..1.0) as f64);
            v *= (width as f64 / v.norm_squared()).sqrt();
            v
        })
        .collect()
}

/// sqrt(2)-scaled RELU: identity Q map, RELU C map (the C'(1) = 1 family).
fn scaled_relu() -> ActivationSpec {
    ActivationSpec::new(
        "nrelu",
        |x: f64| std::f64::consts::SQRT_2 * x.max(0.0),
        |x: f64| {
            if x > 0.0 {
                std::f64::consts::SQRT_2
            } else {
                0.0
            }
        },
        true,
    )
    .with_kinks(vec![0.0])
}

#[test]
fn identity_suo_network_preserves_q_exactly() {
    let id = registry_get("identity").unwrap();
    let net = build_dense(20, 32, &id, InitScheme::Suo, 1).unwrap();
    let stats = empirical_qc(&net, &normalized_inputs(32, 8, 2)).unwrap();
    for s in &stats {
        assert!(
            (s.q_mean - 1.0).abs() <= 1e-10 && s.q_std <= 1e-10,
            "layer {}: q = {} +- {}",
            s.layer,
            s.q_mean,
            s.q_std
        );
    }
}

#[test]
fn wide_net_cosines_match_map_predictions() {
    // Width-1024 depth-3 solved-tanh network: empirical pairwise cosine at
    // the output agrees with the iterated C map within 0.05 mean absolute
    // error over ~200 input pairs.
    let depth = 3;
    let width = 1024;
    let tanh = registry_get("tanh").unwrap();
    let psi = 1.5f64.powf(1.0 / depth as f64);
    let sol = solve_transform(&tanh, psi, &SolveOptions::default()).unwrap();
    let hat = transform(&tanh, sol.params).unwrap();
    let net = build_dense(depth, width, &hat, InitScheme::Suo, 12).unwrap();

    let inputs = normalized_inputs(width, 21, 13);
    let traces: Vec<_> = inputs
        .iter()
        .map(|x| net.forward_trace(x).unwrap())
        .collect();

    let predict = |mut c: f64| {
        for _ in 0..depth {
            c = local_c(&hat, c, 1.0, 1.0).unwrap();
        }
        c
    };
    let mut abs_err = 0.0;
    let mut pairs = 0usize;
    for a in 0..inputs.len() {
        for b in (a + 1)..inputs.len() {
            let c0 = inputs[a].dot(&inputs[b]) / (inputs[a].norm() * inputs[b].norm());
            let ha = traces[a].last().unwrap();
            let hb = traces[b].last().unwrap();
            let empirical = ha.dot(hb) / (ha.norm() * hb.norm());
            abs_err += (empirical - predict(c0)).abs();
            pairs += 1;
        }
    }
    assert!(pairs >= 200, "only {pairs} pairs");
    let mae = abs_err / pairs as f64;
    assert!(mae <= 0.05, "mean absolute cosine error {mae}");
}

#[test]
fn solved_tanh_ntk_stays_near_input_cosine() {
    // Depth-10 solved tanh at zeta = 1.05: every per-layer NTK value stays
    // within 0.55 of the input cosine (and the two internal computation
    // routes agree, which ntk_per_layer enforces itself).
    let tanh = registry_get("tanh").unwrap();
    let psi = 1.05f64.powf(0.1);
    let sol = solve_transform(&tanh, psi, &SolveOptions::default()).unwrap();
    let hat = transform(&tanh, sol.params).unwrap();
    for c0 in [-0.8, 0.0, 0.4, 0.9] {
        let r = ntk_per_layer(&hat, 10, c0, 1.0).unwrap();
        assert_eq!(r.theta.len(), 10);
        let max_dev = r
            .theta
            .iter()
            .map(|t| (t - c0).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev <= 0.55, "c0 = {c0}: max |theta - c0| = {max_dev}");
    }
}

#[test]
fn deep_scaled_relu_ntk_is_degenerate() {
    // Depth-100 sqrt(2)-RELU: the early-layer NTK entry collapses while the
    // late-layer entry approaches 1 — the classic degeneracy signature.
    let r = ntk_per_layer(&scaled_relu(), 100, 0.5, 1.0).unwrap();
    assert!((r.q_output - 1.0).abs() < 1e-9, "q_D = {}", r.q_output);
    assert!(r.theta[0] <= 0.3, "theta_1 = {}", r.theta[0]);
    assert!(r.theta[99] >= 0.9, "theta_D = {}", r.theta[99]);
}

#[test]
fn empirical_qc_is_bit_deterministic() {
    let tanh = registry_get("tanh").unwrap();
    let inputs = normalized_inputs(64, 6, 21);
    let a = empirical_qc(
        &build_dense(5, 64, &tanh, InitScheme::Gaussian, 77).unwrap(),
        &inputs,
    )
    .unwrap();
    let b = empirical_qc(
        &build_dense(5, 64, &tanh, InitScheme::Gaussian, 77).unwrap(),
        &inputs,
    )
    .unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.q_mean.to_bits(), y.q_mean.to_bits());
        assert_eq!(x.q_std.to_bits(), y.q_std.to_bits());
        assert_eq!(x.c_mean.to_bits(), y.c_mean.to_bits());
    }
}

#[test]
fn ntk_rejects_bad_arguments() {
    let tanh = registry_get("tanh").unwrap();
    assert!(ntk_per_layer(&tanh, 10, 1.5, 1.0).is_err());
    assert!(ntk_per_layer(&tanh, 10, 0.0, 0.0).is_err());
    assert!(ntk_per_layer(&tanh, 0, 0.0, 1.0).is_err());
}
