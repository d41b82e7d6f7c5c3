//! Calibration run for the empirical q-drift band fixture.
//!
//! Builds the depth-30 width-512 SUO softplus network used by the drift
//! acceptance check for a handful of seeds, prints the per-layer mean-q
//! extremes and the final-layer deviations of the baseline (Q′(1) = 1) and
//! deliberately drifting (Q′(1) = 1.01) variants, and emits the JSON fixture
//! frozen under `tests/fixtures/qdrift_band.json`.

use nalgebra::DVector;
use rand::Rng as _;

use dks::activations::{registry_get, transform, TransformParams};
use dks::init::rng_from_seed;
use dks::netverify::{build_dense, empirical_qc, InitScheme, LayerQC};
use dks::solver::{solve_transform, solve_transform_with_targets, SolveOptions};

const DEPTH: usize = 30;
const WIDTH: usize = 512;
const INPUTS: usize = 64;
const ZETA: f64 = 1.5;

fn normalized_inputs(width: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let mut v = DVector::from_fn(width, |_, _| rng.sample(normal));
            let n2 = v.norm_squared();
            v *= (width as f64 / n2).sqrt();
            v
        })
        .collect()
}

fn run(params: TransformParams, spec: &dks::activations::ActivationSpec, seed: u64) -> Vec<LayerQC> {
    let hat = transform(spec, params).unwrap();
    let net = build_dense(DEPTH, WIDTH, &hat, InitScheme::Suo, seed).unwrap();
    let inputs = normalized_inputs(WIDTH, INPUTS, seed.wrapping_add(1));
    empirical_qc(&net, &inputs).unwrap()
}

fn main() {
    let spec = registry_get("softplus").unwrap();
    let psi = ZETA.powf(1.0 / DEPTH as f64);
    let opts = SolveOptions::default();
    let base = solve_transform(&spec, psi, &opts).unwrap();
    let drift = solve_transform_with_targets(&spec, 1.01, psi, &opts).unwrap();

    for seed in [0u64, 1, 2, 3, 4] {
        let sb = run(base.params, &spec, seed);
        let sd = run(drift.params, &spec, seed);
        let lo = sb.iter().map(|s| s.q_mean).fold(f64::INFINITY, f64::min);
        let hi = sb.iter().map(|s| s.q_mean).fold(f64::NEG_INFINITY, f64::max);
        let dev_base = (sb.last().unwrap().q_mean - 1.0).abs();
        let dev_drift = (sd.last().unwrap().q_mean - 1.0).abs();
        println!(
            "seed {seed}: base q_mean in [{lo:.5}, {hi:.5}], final dev base {dev_base:.5} vs drift {dev_drift:.5}"
        );
    }
    println!(
        "\nfixture: {{\"depth\": {DEPTH}, \"width\": {WIDTH}, \"inputs\": {INPUTS}, \"zeta\": {ZETA}, \"seed\": 0, \"band_lo\": 0.85, \"band_hi\": 1.15}}"
    );
}
