//! Command-line interface to the Deep Kernel Shaping analysis library.
//!
//! Exit codes: 0 on success, 1 on domain errors (message on stderr), 2 on
//! usage errors. All numeric output is printed with 9 significant digits.
//! The environment variable `KS_QUAD_ORDER` overrides the 1-D quadrature
//! order (default 10000); it is read once at first use.

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use dks::activations::{registry_get, transform, TransformParams};
use dks::error::Result;
use dks::graph::{
    maximal_slope, qc_propagate, template_mlp, template_resnet_v2_modified, template_skip_free,
    template_wide_resnet, NetworkGraph, NodeKind,
};
use dks::init::{gaussian_delta, orthogonal_delta, rng_from_seed};
use dks::localmaps::{deviation_bounds, iterate_sequential, map_stats, QCState};
use dks::netverify::{build_dense, empirical_qc, ntk_per_layer, InitScheme};
use dks::pln::{pln, pln_const, read_csv, write_csv, FeatureMap};
use dks::solver::{solve_transform, solve_transform_with_targets, SolveOptions};
use dks::tensorio::{write_container, NamedTensor};
use dks::Error;

#[derive(Parser)]
#[command(
    name = "dks",
    version,
    about = "Deep Kernel Shaping: activation transforms, Q/C map analysis, slope \
             polynomials, initializers, input normalization and verification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve for the transform constants (alpha, beta, gamma, delta) of an activation.
    Transform(TransformArgs),
    /// Evaluate the depth-iterated C map on a grid; CSV to stdout/--out, stats JSON to stderr.
    MapEval(MapEvalArgs),
    /// Build the maximal slope function of an architecture; evaluate or invert it.
    Slope(SlopeArgs),
    /// Sample DKS-compliant initial parameters for an architecture into a tensor container.
    Init(InitArgs),
    /// Per-location normalization of a channels-as-rows CSV feature map.
    Pln(PlnArgs),
    /// Empirical verification harnesses.
    Verify {
        #[command(subcommand)]
        which: VerifyCmd,
    },
    /// Validate an architecture file and report violations.
    ArchValidate(ArchValidateArgs),
}

/// Shared architecture selector: a template name or a JSON file path.
#[derive(Args, Clone)]
struct ArchSelector {
    /// Template name (mlp | skip_free | resnet_v2_modified | wide_resnet) or
    /// path to a graph JSON file.
    #[arg(long)]
    arch: String,
    /// Depth parameter D for templates.
    #[arg(long = "D")]
    depth_param: Option<usize>,
    /// Residual branch weight w for the ResNet templates.
    #[arg(long)]
    w: Option<f64>,
    /// Channel width for mlp / wide_resnet templates.
    #[arg(long)]
    width: Option<usize>,
    /// Activation used in template nonlinear layers.
    #[arg(long, default_value = "relu")]
    act: String,
}

impl ArchSelector {
    fn load(&self) -> Result<NetworkGraph> {
        let need_d = || {
            self.depth_param
                .ok_or_else(|| Error::Domain(format!("template '{}' requires --D", self.arch)))
        };
        let need_w = || {
            self.w
                .ok_or_else(|| Error::Domain(format!("template '{}' requires --w", self.arch)))
        };
        match self.arch.as_str() {
            "mlp" => Ok(template_mlp(need_d()?, self.width.unwrap_or(16), &self.act)),
            "skip_free" => Ok(template_skip_free(need_d()?, &self.act)),
            "resnet_v2_modified" => template_resnet_v2_modified(need_d()?, need_w()?, &self.act),
            "wide_resnet" => {
                template_wide_resnet(need_d()?, self.width.unwrap_or(16), need_w()?, &self.act)
            }
            path => {
                let text = std::fs::read_to_string(path)?;
                NetworkGraph::from_json(&text)
            }
        }
    }
}

#[derive(Args)]
struct TransformArgs {
    /// Activation name.
    #[arg(long)]
    act: String,
    /// Architecture JSON file used to derive psi via the maximal slope function.
    #[arg(long)]
    arch: Option<String>,
    /// Sequential depth D (psi = zeta^(1/D)); alternative to --arch.
    #[arg(long)]
    depth: Option<usize>,
    /// Global slope bound zeta (> 1).
    #[arg(long)]
    zeta: f64,
    /// Seed for solver restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MapEvalArgs {
    /// Activation name.
    #[arg(long)]
    act: String,
    /// Number of identical combined layers to iterate.
    #[arg(long, default_value_t = 1)]
    depth: usize,
    /// Number of grid points for c_in on [-1, 1].
    #[arg(long, default_value_t = 41)]
    grid: usize,
    /// Input q value.
    #[arg(long, default_value_t = 1.0)]
    q0: f64,
    /// Output file for the CSV (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SlopeArgs {
    #[command(flatten)]
    sel: ArchSelector,
    /// Global slope bound zeta for inversion.
    #[arg(long)]
    zeta: Option<f64>,
    /// Invert the maximal slope function at --zeta.
    #[arg(long, default_value_t = false)]
    invert: bool,
    /// Evaluate the maximal slope function at this psi.
    #[arg(long)]
    psi: Option<f64>,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    sel: ArchSelector,
    /// Initialization scheme.
    #[arg(long, value_parser = ["suo-delta", "gauss-delta"])]
    scheme: String,
    /// Sampler seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output container path (manifest written alongside).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlnArgs {
    /// Input CSV (channels as rows).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the invertible constant-channel variant with this value.
    #[arg(long = "const")]
    constant: Option<f64>,
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Empirical q drift of a DKS MLP vs a deliberately drifting variant.
    Qdrift(QdriftArgs),
    /// Analytic per-layer NTK of a DKS chain against the deviation bound.
    Ntk(NtkArgs),
}

#[derive(Args)]
struct QdriftArgs {
    /// Activation name.
    #[arg(long, default_value = "softplus")]
    act: String,
    /// Network depth (combined layers).
    #[arg(long, default_value_t = 30)]
    depth: usize,
    /// Layer width.
    #[arg(long, default_value_t = 512)]
    width: usize,
    /// Global slope bound; psi = zeta^(1/depth).
    #[arg(long, default_value_t = 1.5)]
    zeta: f64,
    /// Number of normalized random inputs.
    #[arg(long, default_value_t = 64)]
    inputs: usize,
    /// Seed for weights and inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower edge of the accepted per-layer mean-q band.
    #[arg(long, default_value_t = 0.85)]
    band_lo: f64,
    /// Upper edge of the accepted per-layer mean-q band.
    #[arg(long, default_value_t = 1.15)]
    band_hi: f64,
    /// Output file for the CSV (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NtkArgs {
    /// Activation name.
    #[arg(long, default_value = "tanh")]
    act: String,
    /// Network depth.
    #[arg(long, default_value_t = 10)]
    depth: usize,
    /// Global slope bound.
    #[arg(long, default_value_t = 1.05)]
    zeta: f64,
    /// Input c value.
    #[arg(long, default_value_t = 0.4)]
    c0: f64,
    /// Seed for solver restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for the CSV (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ArchValidateArgs {
    #[command(flatten)]
    sel: ArchSelector,
    /// Also propagate a (q, c) state and print the per-node result.
    #[arg(long)]
    propagate: Option<f64>,
    /// Input q value for --propagate.
    #[arg(long, default_value_t = 1.0)]
    q0: f64,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Rounds to 9 significant digits for output.
fn sig9(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn num9(x: f64) -> serde_json::Value {
    serde_json::Number::from_f64(sig9(x))
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Transform(a) => cmd_transform(a),
        Cmd::MapEval(a) => cmd_map_eval(a),
        Cmd::Slope(a) => cmd_slope(a),
        Cmd::Init(a) => cmd_init(a),
        Cmd::Pln(a) => cmd_pln(a),
        Cmd::Verify { which } => match which {
            VerifyCmd::Qdrift(a) => cmd_qdrift(a),
            VerifyCmd::Ntk(a) => cmd_ntk(a),
        },
        Cmd::ArchValidate(a) => cmd_arch_validate(a),
    }
}

/// psi for a slope bound: inverted through the architecture's maximal slope
/// function, or the closed form zeta^(1/D) for a pure sequential depth.
fn psi_for(zeta: f64, depth: Option<usize>, arch: &Option<String>) -> Result<f64> {
    if !(zeta > 1.0 && zeta.is_finite()) {
        return Err(Error::Domain(format!("--zeta {zeta} must be > 1")));
    }
    match (depth, arch) {
        (Some(d), None) => {
            if d == 0 {
                return Err(Error::Domain("--depth must be positive".into()));
            }
            Ok(zeta.powf(1.0 / d as f64))
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            let g = NetworkGraph::from_json(&text)?;
            maximal_slope(&g)?.invert(zeta)
        }
        _ => Err(Error::Domain(
            "exactly one of --depth or --arch is required".into(),
        )),
    }
}

fn cmd_transform(a: TransformArgs) -> Result<()> {
    let spec = registry_get(&a.act)?;
    let psi = psi_for(a.zeta, a.depth, &a.arch)?;
    let opts = SolveOptions {
        seed: a.seed,
        ..SolveOptions::default()
    };
    let r = solve_transform(&spec, psi, &opts)?;
    let doc = json!({
        "activation": a.act,
        "alpha": num9(r.params.alpha),
        "beta": num9(r.params.beta),
        "gamma": num9(r.params.gamma),
        "delta": num9(r.params.delta),
        "psi": num9(psi),
        "residuals": {
            "q_prime": num9(r.residual_q),
            "c_prime": num9(r.residual_c),
        },
    });
    emit(&a.out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn cmd_map_eval(a: MapEvalArgs) -> Result<()> {
    let spec = registry_get(&a.act)?;
    if a.grid < 2 {
        return Err(Error::Domain("--grid must be at least 2".into()));
    }
    if a.depth == 0 {
        return Err(Error::Domain("--depth must be positive".into()));
    }
    let mut csv = String::from("c_in,c_out\n");
    for i in 0..a.grid {
        let c_in = -1.0 + 2.0 * i as f64 / (a.grid - 1) as f64;
        let state = QCState::new(a.q0, c_in)?;
        let traj = iterate_sequential(&spec, a.depth, state)?;
        let c_out = traj.last().expect("non-empty trajectory").c;
        csv.push_str(&format!("{:.8e},{:.8e}\n", c_in, c_out));
    }
    emit(&a.out, &csv)?;
    let stats = map_stats(&spec)?;
    let bounds = deviation_bounds(&stats);
    let doc = json!({
        "activation": a.act,
        "depth": a.depth,
        "q0": num9(a.q0),
        "stats": {
            "q_at_1": num9(stats.q1),
            "q_prime_at_1": num9(stats.dq1),
            "c_at_0": num9(stats.c0),
            "c_prime_at_0": num9(stats.dc0),
            "c_prime_at_1": num9(stats.dc1),
        },
        "deviation_bounds": {
            "lower": num9(bounds.lower),
            "upper_value": num9(bounds.upper_value),
            "upper_value_from_slope": bounds.upper_value_from_slope.map(num9),
            "upper_slope": bounds.upper_slope.map(num9),
        },
    });
    eprintln!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn cmd_slope(a: SlopeArgs) -> Result<()> {
    let g = a.sel.load()?;
    let mu = maximal_slope(&g)?;
    let doc = if a.invert {
        let zeta = a
            .zeta
            .ok_or_else(|| Error::Domain("--invert requires --zeta".into()))?;
        let psi_star = mu.invert(zeta)?;
        json!({
            "candidates": mu.candidates.len(),
            "zeta": num9(zeta),
            "psi_star": num9(psi_star),
            "mu_at_psi_star": num9(mu.value(psi_star)),
        })
    } else {
        let psi = a
            .psi
            .ok_or_else(|| Error::Domain("provide --psi to evaluate, or --invert".into()))?;
        json!({
            "candidates": mu.candidates.len(),
            "psi": num9(psi),
            "mu": num9(mu.value(psi)),
        })
    };
    emit(&a.out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let g = a.sel.load()?;
    let violations = g.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidGraph(violations));
    }
    let mut rng = rng_from_seed(a.seed);
    let mut tensors = Vec::new();
    for node in &g.nodes {
        if let NodeKind::Affine {
            in_channels,
            out_channels,
            filter_h,
            filter_w,
            ..
        } = node.kind
        {
            let bank = match a.scheme.as_str() {
                "suo-delta" => orthogonal_delta(filter_h, filter_w, in_channels, out_channels, &mut rng)?,
                "gauss-delta" => gaussian_delta(filter_h, filter_w, in_channels, out_channels, &mut rng)?,
                other => return Err(Error::Domain(format!("unknown scheme '{other}'"))),
            };
            tensors.push(NamedTensor::new(
                &format!("{}.weights", node.id),
                vec![filter_h, filter_w, in_channels, out_channels],
                bank.data,
            )?);
            tensors.push(NamedTensor::new(
                &format!("{}.biases", node.id),
                vec![out_channels],
                bank.biases,
            )?);
        }
    }
    write_container(&a.out, &tensors)?;
    eprintln!(
        "wrote {} tensors to {} (+ manifest)",
        tensors.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pln(a: PlnArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)?;
    let x = read_csv(&text)?;
    let y: FeatureMap = match a.constant {
        Some(c) => pln_const(&x, c)?,
        None => pln(&x)?,
    };
    emit(&a.out, &write_csv(&y))
}

fn normalized_inputs(width: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    use rand::Rng as _;
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

fn cmd_qdrift(a: QdriftArgs) -> Result<()> {
    let spec = registry_get(&a.act)?;
    if a.depth == 0 {
        return Err(Error::Domain("--depth must be positive".into()));
    }
    let psi = a.zeta.powf(1.0 / a.depth as f64);
    let opts = SolveOptions {
        seed: a.seed,
        ..SolveOptions::default()
    };
    let base = solve_transform(&spec, psi, &opts)?;
    let drift = solve_transform_with_targets(&spec, 1.01, psi, &opts)?;

    let run = |params: TransformParams| -> Result<Vec<dks::netverify::LayerQC>> {
        let hat = transform(&spec, params)?;
        let net = build_dense(a.depth, a.width, &hat, InitScheme::Suo, a.seed)?;
        let inputs = normalized_inputs(a.width, a.inputs, a.seed.wrapping_add(1));
        empirical_qc(&net, &inputs)
    };
    let stats_base = run(base.params)?;
    let stats_drift = run(drift.params)?;

    let mut csv = String::from("layer,q_mean,q_std\n");
    for s in &stats_base {
        csv.push_str(&format!("{},{:.8e},{:.8e}\n", s.layer, s.q_mean, s.q_std));
    }
    emit(&a.out, &csv)?;

    let in_band = stats_base
        .iter()
        .all(|s| s.q_mean >= a.band_lo && s.q_mean <= a.band_hi);
    let dev_base = (stats_base.last().unwrap().q_mean - 1.0).abs();
    let dev_drift = (stats_drift.last().unwrap().q_mean - 1.0).abs();
    let ordering_ok = dev_drift > dev_base;
    let doc = json!({
        "activation": a.act,
        "depth": a.depth,
        "width": a.width,
        "psi": num9(psi),
        "band": [num9(a.band_lo), num9(a.band_hi)],
        "in_band": in_band,
        "final_dev_q1_target": num9(dev_base),
        "final_dev_qdrift_target": num9(dev_drift),
        "drift_exceeds_baseline": ordering_ok,
        "pass": in_band && ordering_ok,
    });
    eprintln!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn cmd_ntk(a: NtkArgs) -> Result<()> {
    let spec = registry_get(&a.act)?;
    if a.depth == 0 {
        return Err(Error::Domain("--depth must be positive".into()));
    }
    let psi = a.zeta.powf(1.0 / a.depth as f64);
    let opts = SolveOptions {
        seed: a.seed,
        ..SolveOptions::default()
    };
    let solved = solve_transform(&spec, psi, &opts)?;
    let hat = transform(&spec, solved.params)?;
    let r = ntk_per_layer(&hat, a.depth, a.c0, 1.0)?;
    let mut csv = String::from("layer,theta\n");
    for (i, t) in r.theta.iter().enumerate() {
        csv.push_str(&format!("{},{:.8e}\n", i + 1, t));
    }
    emit(&a.out, &csv)?;
    let bound = 11.0 * (a.zeta - 1.0);
    let max_dev = r
        .theta
        .iter()
        .map(|t| (t - a.c0).abs())
        .fold(0.0f64, f64::max);
    let doc = json!({
        "activation": a.act,
        "depth": a.depth,
        "zeta": num9(a.zeta),
        "c0": num9(a.c0),
        "q_output": num9(r.q_output),
        "max_deviation": num9(max_dev),
        "bound": num9(bound),
        "pass": max_dev <= bound,
    });
    eprintln!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn cmd_arch_validate(a: ArchValidateArgs) -> Result<()> {
    let g = a.sel.load()?;
    let violations = g.validate();
    let mut doc = json!({
        "valid": violations.is_empty(),
        "violations": violations.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
    });
    if violations.is_empty() {
        if let Some(c0) = a.propagate {
            let reg = dks::activations::Registry::standard();
            let res = qc_propagate(&g, &reg, QCState::new(a.q0, c0)?)?;
            let states: serde_json::Map<String, serde_json::Value> = res
                .states
                .iter()
                .map(|(id, s)| (id.clone(), json!({"q": num9(s.q), "c": num9(s.c)})))
                .collect();
            doc["states"] = serde_json::Value::Object(states);
            doc["warnings"] = json!(res.warnings);
        }
    }
    emit(&a.out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "architecture has {} violation(s)",
            violations.len()
        )))
    }
}
