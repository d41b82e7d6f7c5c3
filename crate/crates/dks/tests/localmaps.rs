//! Integration tests for the local Q/C maps: closed forms, shape properties
//! shared by every activation, derivative consistency, and deviation bounds.

use dks::activations::{registry_get, transform, Registry};
use dks::localmaps::{
    deviation_bounds, iterate_sequential, local_c, local_c_deriv, local_q, local_q_deriv,
    map_stats, QCState,
};
use dks::solver::complete_transform;

/// Closed-form RELU C map: `(sqrt(1 - c^2) + (pi - acos c) c) / pi`.
fn relu_c_closed(c: f64) -> f64 {
    ((1.0 - c * c).sqrt() + (std::f64::consts::PI - c.acos()) * c) / std::f64::consts::PI
}

#[test]
fn relu_c_map_matches_closed_form_on_grid() {
    let relu = registry_get("relu").unwrap();
    for i in 0..=200 {
        let c = -1.0 + i as f64 / 100.0;
        let got = local_c(&relu, c, 1.0, 1.0).unwrap();
        let want = relu_c_closed(c);
        assert!(
            (got - want).abs() < 1e-10,
            "c = {c}: got {got}, closed form {want}"
        );
    }
}

#[test]
fn erf_maps_match_closed_forms() {
    let erf = registry_get("erf").unwrap();
    let q_closed = |q: f64| 2.0 / std::f64::consts::PI * (2.0 * q / (1.0 + 2.0 * q)).asin();
    for q in [0.3f64, 1.0, 2.5] {
        let got = local_q(&erf, q).unwrap();
        assert!((got - q_closed(q)).abs() < 1e-10, "Q({q}) = {got}");
    }
    for c in [-0.8f64, -0.2, 0.0, 0.5, 0.95] {
        let want = (2.0 * c / 3.0).asin() / (2.0f64 / 3.0).asin();
        let got = local_c(&erf, c, 1.0, 1.0).unwrap();
        assert!((got - want).abs() < 1e-10, "C({c}) = {got}, want {want}");
    }
}

#[test]
fn c_maps_fix_perfect_correlation_and_bound_range() {
    let reg = Registry::standard();
    for name in reg.names() {
        let spec = reg.get(&name).unwrap();
        for q in [0.5, 1.0, 3.0] {
            let at_one = local_c(&spec, 1.0, q, q).unwrap();
            assert!(
                (at_one - 1.0).abs() < 1e-12,
                "{name}: C(1, {q}, {q}) = {at_one}"
            );
        }
        for i in 0..=40 {
            let c = -1.0 + i as f64 / 20.0;
            let v = local_c(&spec, c, 1.0, 1.0).unwrap();
            assert!((-1.0..=1.0 + 1e-12).contains(&v), "{name}: C({c}) = {v}");
        }
    }
}

#[test]
fn c_maps_non_decreasing_and_convex_on_unit_interval() {
    let reg = Registry::standard();
    for name in reg.names() {
        let spec = reg.get(&name).unwrap();
        let vals: Vec<f64> = (0..=200)
            .map(|i| local_c(&spec, i as f64 / 200.0, 1.0, 1.0).unwrap())
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "{name}: C map decreasing: {w:?}");
        }
        for w in vals.windows(3) {
            assert!(
                w[2] - 2.0 * w[1] + w[0] >= -1e-9,
                "{name}: C map concave segment: {w:?}"
            );
        }
    }
}

#[test]
fn c_map_reflection_bound() {
    // From the non-negative power-series representation:
    // C(-c) + C(c) >= 2 C(0) for all c.
    let reg = Registry::standard();
    for name in reg.names() {
        let spec = reg.get(&name).unwrap();
        let c0 = local_c(&spec, 0.0, 1.0, 1.0).unwrap();
        for i in 1..=10 {
            let c = i as f64 / 10.0;
            let plus = local_c(&spec, c, 1.0, 1.0).unwrap();
            let minus = local_c(&spec, -c, 1.0, 1.0).unwrap();
            assert!(
                plus + minus >= 2.0 * c0 - 1e-9,
                "{name} at c = {c}: C(c) + C(-c) = {} < 2 C(0) = {}",
                plus + minus,
                2.0 * c0
            );
        }
    }
}

#[test]
fn c_derivative_matches_finite_differences() {
    let reg = Registry::standard();
    for name in ["tanh", "erf", "softplus", "sigmoid", "swish", "relu"] {
        let spec = reg.get(name).unwrap();
        for c in [-0.9, -0.3, 0.2, 0.7] {
            let h = 1e-5;
            let fd = (local_c(&spec, c + h, 1.0, 1.0).unwrap()
                - local_c(&spec, c - h, 1.0, 1.0).unwrap())
                / (2.0 * h);
            let d = local_c_deriv(&spec, c, 1.0, 1).unwrap();
            assert!(
                (fd - d).abs() < 1e-6 * d.abs().max(1.0),
                "{name} at c = {c}: C' = {d}, fd = {fd}"
            );
        }
    }
}

#[test]
fn q_derivative_matches_finite_differences() {
    let reg = Registry::standard();
    for name in reg.names() {
        let spec = reg.get(&name).unwrap();
        for q in [0.5, 1.0, 2.0] {
            let h = 1e-5;
            let fd = (local_q(&spec, q + h).unwrap() - local_q(&spec, q - h).unwrap()) / (2.0 * h);
            let d = local_q_deriv(&spec, q).unwrap();
            assert!(
                (fd - d).abs() < 1e-5 * d.abs().max(1.0),
                "{name} at q = {q}: Q' = {d}, fd = {fd}"
            );
        }
    }
}

#[test]
fn contractive_centered_map_converges_to_uncorrelated_fixed_point() {
    // Centering and normalizing tanh(2x) yields a map with C(0) = 0 and
    // Q(1) = 1. Convexity then puts C(c) strictly below c on (0, 1), so deep
    // iteration sends every interior c to 0 while q stays at 1.
    let tanh = registry_get("tanh").unwrap();
    let params = complete_transform(&tanh, 2.0, 0.0).unwrap();
    let hat = transform(&tanh, params).unwrap();
    let stats = map_stats(&hat).unwrap();
    assert!((stats.q1 - 1.0).abs() < 1e-9, "Q(1) = {}", stats.q1);
    assert!(stats.c0.abs() < 1e-9, "C(0) = {}", stats.c0);
    assert!(stats.dc0 < 1.0, "C'(0) = {}", stats.dc0);
    for c0 in [-0.9, 0.4, 0.99] {
        let traj = iterate_sequential(&hat, 300, QCState::new(1.0, c0).unwrap()).unwrap();
        let last = traj.last().unwrap();
        assert!((last.q - 1.0).abs() < 1e-7, "q drifted to {}", last.q);
        assert!(last.c.abs() < 1e-6, "c0 = {c0} ended at c = {}", last.c);
    }
}

#[test]
fn centered_maps_satisfy_slope_inequality() {
    // For maps with C(0) = 0 and C(1) = 1 the power series gives
    // C'(0) + C'(1) >= 2.
    let reg = Registry::standard();
    for name in ["tanh", "softplus", "erf", "sigmoid", "relu"] {
        let spec = reg.get(name).unwrap();
        let params = complete_transform(&spec, 1.0, 0.3).unwrap();
        let hat = transform(&spec, params).unwrap();
        let stats = map_stats(&hat).unwrap();
        assert!(stats.c0.abs() < 1e-9, "{name}: C(0) = {}", stats.c0);
        assert!(
            stats.dc0 + stats.dc1 >= 2.0 - 1e-7,
            "{name}: C'(0) + C'(1) = {}",
            stats.dc0 + stats.dc1
        );
    }
}

#[test]
fn deviation_bounds_bracket_relu_grid_maximum() {
    let relu = registry_get("relu").unwrap();
    let stats = map_stats(&relu).unwrap();
    let bounds = deviation_bounds(&stats);
    let max_dev = (0..=200)
        .map(|i| {
            let c = -1.0 + i as f64 / 100.0;
            (relu_c_closed(c) - c).abs()
        })
        .fold(0.0f64, f64::max);
    assert!(
        bounds.lower <= max_dev + 1e-12,
        "lower bound {} exceeds grid max {max_dev}",
        bounds.lower
    );
    assert!(
        max_dev <= bounds.upper_value + 1e-12,
        "grid max {max_dev} exceeds upper bound {}",
        bounds.upper_value
    );
    // RELU's C map does not vanish at c = 0, so the slope-form bounds are
    // not applicable.
    assert!(bounds.upper_value_from_slope.is_none());
    assert!(bounds.upper_slope.is_none());
}

#[test]
fn slope_form_deviation_bounds_hold_for_centered_map() {
    let tanh = registry_get("tanh").unwrap();
    let params = complete_transform(&tanh, 1.5, 0.4).unwrap();
    let hat = transform(&tanh, params).unwrap();
    let stats = map_stats(&hat).unwrap();
    let bounds = deviation_bounds(&stats);
    let upper = bounds.upper_value_from_slope.expect("C(0) = 0 here");
    let max_dev = (0..=200)
        .map(|i| {
            let c = i as f64 / 200.0;
            (local_c(&hat, c, 1.0, 1.0).unwrap() - c).abs()
        })
        .fold(0.0f64, f64::max);
    assert!(
        bounds.lower <= max_dev + 1e-9 && max_dev <= upper + 1e-9,
        "max dev {max_dev} outside [{}, {upper}]",
        bounds.lower
    );
}
