//! Solving for the transform constants (α, β, γ, δ) that enforce the map
//! conditions of a shaped activation.
//!
//! The output constants are eliminated analytically: for any input constants,
//! `δ = −E[φ(αx + β)]` and `γ = Var[φ(αx + β)]^{-1/2}` force `C(0) = 0` and
//! `Q(1) = 1` exactly. The remaining two conditions, `Q′(1) = 1` and
//! `C′(1) = ψ`, become a 2-D root-finding problem in (α, β) solved by a
//! damped quasi-Newton iteration with a fixed guess list plus seeded random
//! restarts.
//!
//! Positively homogeneous activations (RELU family) make α redundant: scaling
//! the input commutes with the function up to a multiple that γ undoes. For
//! those, α is pinned to 1 and the single remaining condition `C′(1) = ψ` is
//! solved by bracketing and bisection in β.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::{transform, ActivationSpec, TransformParams};
use crate::error::{Error, Result};
use crate::quadrature::{default_rule, gauss_expect_kinked};

/// Residual tolerance (∞-norm) for a converged solve.
pub const SOLVE_TOL: f64 = 1e-8;

/// Options controlling the transform solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Residual ∞-norm tolerance (default 1e-8).
    pub tol: f64,
    /// Random restarts after the fixed guess list is exhausted (default 50).
    pub max_restarts: usize,
    /// Newton iterations per start (default 100).
    pub max_iters: usize,
    /// Seed for the random restart stream.
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: SOLVE_TOL,
            max_restarts: 50,
            max_iters: 100,
            seed: 0,
        }
    }
}

/// A converged transform solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveResult {
    /// The solved constants.
    pub params: TransformParams,
    /// Residual of the `Q′(1)` condition at the solution.
    pub residual_q: f64,
    /// Residual of the `C′(1)` condition at the solution.
    pub residual_c: f64,
    /// Number of starts consumed (fixed guesses count as starts).
    pub starts_used: usize,
}

/// Fixed initial guesses `(α, β)` tried before random restarts.
pub const FIXED_GUESSES: [(f64, f64); 6] = [
    (1.0, 0.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (0.1, 0.0),
    (0.1, 1.0),
    (0.1, -1.0),
];

/// Computes the output constants `(γ, δ)` that center and normalize the
/// transformed activation: `δ = −E[φ(αx + β)]`, `γ = Var[φ(αx + β)]^{-1/2}`.
///
/// # Errors
/// A non-positive variance (constant transformed activation) is reported as
/// [`Error::DegenerateActivation`].
pub fn eliminate_output_constants(
    spec: &ActivationSpec,
    alpha: f64,
    beta: f64,
) -> Result<(f64, f64)> {
    let rule = default_rule();
    // The integrand is non-smooth where αx + β crosses a kink of φ.
    let kinks: Vec<f64> = spec.kinks.iter().map(|&k| (k - beta) / alpha).collect();
    let mean = gauss_expect_kinked(|x| spec.phi(alpha * x + beta), &kinks, rule)?;
    let second = gauss_expect_kinked(
        |x| {
            let v = spec.phi(alpha * x + beta);
            v * v
        },
        &kinks,
        rule,
    )?;
    let variance = second - mean * mean;
    if !(variance > 1e-300) {
        return Err(Error::DegenerateActivation {
            alpha,
            beta,
            variance,
        });
    }
    Ok((variance.sqrt().recip(), -mean))
}

/// Builds the full transform for input constants `(α, β)` with the output
/// constants eliminated analytically.
pub fn complete_transform(spec: &ActivationSpec, alpha: f64, beta: f64) -> Result<TransformParams> {
    let (gamma, delta) = eliminate_output_constants(spec, alpha, beta)?;
    Ok(TransformParams {
        alpha,
        beta,
        gamma,
        delta,
    })
}

/// Residuals of the two remaining map conditions at `q = 1` for a transformed
/// activation `φ̂`: `(E[φ̂(x) φ̂′(x) x] − t_q, E[φ̂′(x)²] − t_c)`, i.e.
/// `Q′(1) − t_q` and `C′(1) − t_c` (the latter because the elimination makes
/// `Q(1) = 1`).
pub fn condition_residuals(
    spec: &ActivationSpec,
    params: TransformParams,
    qprime_target: f64,
    cprime_target: f64,
) -> Result<(f64, f64)> {
    let hat = transform(spec, params)?;
    let rule = default_rule();
    let r_q = gauss_expect_kinked(|x| hat.phi(x) * hat.dphi(x) * x, &hat.kinks, rule)? - qprime_target;
    let r_c = gauss_expect_kinked(
        |x| {
            let d = hat.dphi(x);
            d * d
        },
        &hat.kinks,
        rule,
    )? - cprime_target;
    Ok((r_q, r_c))
}

/// Solves for the constants that give `Q(1) = 1`, `Q′(1) = 1`, `C(0) = 0` and
/// `C′(1) = psi`.
///
/// # Errors
/// `psi` must be ≥ 1 (for exactly 1 the near-linear solution is returned only
/// if the iteration converges); non-convergence after all restarts is
/// reported with the best candidate seen.
pub fn solve_transform(
    spec: &ActivationSpec,
    psi: f64,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    solve_transform_with_targets(spec, 1.0, psi, opts)
}

/// Like [`solve_transform`] but with an explicit `Q′(1)` target (used e.g. to
/// deliberately induce a controlled q drift for verification).
pub fn solve_transform_with_targets(
    spec: &ActivationSpec,
    qprime_target: f64,
    psi: f64,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    if !(psi >= 1.0 && psi.is_finite()) {
        return Err(Error::Domain(format!(
            "slope target psi = {psi} must be a finite value >= 1"
        )));
    }
    if !(qprime_target > 0.0 && qprime_target.is_finite()) {
        return Err(Error::Domain(format!(
            "Q'(1) target {qprime_target} must be finite and positive"
        )));
    }
    if spec.homogeneous {
        return solve_homogeneous(spec, psi, opts);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, f64, f64)> = None; // (norm, alpha, beta)
    let mut history = String::new();
    let total_starts = FIXED_GUESSES.len() + opts.max_restarts;

    for start in 0..total_starts {
        let (mut a, mut b) = if start < FIXED_GUESSES.len() {
            FIXED_GUESSES[start]
        } else {
            (rng.gen_range(f64::EPSILON..=2.0), rng.gen_range(-3.0..=3.0))
        };
        let mut r = match residuals_at(spec, a, b, qprime_target, psi) {
            Ok(r) => r,
            Err(_) => {
                history.push_str(&format!("start {start}: ({a}, {b}) degenerate\n"));
                continue;
            }
        };
        let mut converged = false;
        for _ in 0..opts.max_iters {
            let norm = r.0.abs().max(r.1.abs());
            track_best(&mut best, norm2(r), a, b);
            if norm <= opts.tol {
                converged = true;
                break;
            }
            // Finite-difference Jacobian.
            let ha = 1e-6 * a.abs().max(1.0);
            let hb = 1e-6 * b.abs().max(1.0);
            let ra = match residuals_at(spec, a + ha, b, qprime_target, psi) {
                Ok(v) => v,
                Err(_) => break,
            };
            let rb = match residuals_at(spec, a, b + hb, qprime_target, psi) {
                Ok(v) => v,
                Err(_) => break,
            };
            let j = [
                [(ra.0 - r.0) / ha, (rb.0 - r.0) / hb],
                [(ra.1 - r.1) / ha, (rb.1 - r.1) / hb],
            ];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-300 || !det.is_finite() {
                break;
            }
            let da = -(j[1][1] * r.0 - j[0][1] * r.1) / det;
            let db = -(-j[1][0] * r.0 + j[0][0] * r.1) / det;
            // Backtracking: accept the first damped step that reduces ‖r‖₂
            // and keeps α positive.
            let base = norm2(r);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let na = a + t * da;
                let nb = b + t * db;
                if na > 1e-10 {
                    if let Ok(nr) = residuals_at(spec, na, nb, qprime_target, psi) {
                        if norm2(nr) < base {
                            a = na;
                            b = nb;
                            r = nr;
                            accepted = true;
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let norm = r.0.abs().max(r.1.abs());
        track_best(&mut best, norm2(r), a, b);
        history.push_str(&format!(
            "start {start}: ({a:.6}, {b:.6}) residual inf-norm {norm:.3e}\n"
        ));
        if converged || norm <= opts.tol {
            let params = complete_transform(spec, a, b)?;
            let (rq, rc) = condition_residuals(spec, params, qprime_target, psi)?;
            return Ok(SolveResult {
                params,
                residual_q: rq,
                residual_c: rc,
                starts_used: start + 1,
            });
        }
    }

    let (best_norm, best_alpha, best_beta) = best.unwrap_or((f64::INFINITY, f64::NAN, f64::NAN));
    Err(Error::SolveFailed {
        restarts: opts.max_restarts,
        best_residual: best_norm.sqrt(),
        best_alpha,
        best_beta,
        history,
    })
}

/// Residuals in (α, β) with the output constants eliminated.
fn residuals_at(
    spec: &ActivationSpec,
    alpha: f64,
    beta: f64,
    qprime_target: f64,
    cprime_target: f64,
) -> Result<(f64, f64)> {
    let params = complete_transform(spec, alpha, beta)?;
    condition_residuals(spec, params, qprime_target, cprime_target)
}

fn norm2(r: (f64, f64)) -> f64 {
    r.0 * r.0 + r.1 * r.1
}

fn track_best(best: &mut Option<(f64, f64, f64)>, sq_norm: f64, a: f64, b: f64) {
    if sq_norm.is_finite() && best.map(|(n, _, _)| sq_norm < n).unwrap_or(true) {
        *best = Some((sq_norm, a, b));
    }
}

/// Degenerate 1-D solve for positively homogeneous activations: α is pinned
/// to 1 and `C′(1) = ψ` is solved in β by bracketing on a grid over `[-6, 6]`
/// followed by bisection.
fn solve_homogeneous(spec: &ActivationSpec, psi: f64, opts: &SolveOptions) -> Result<SolveResult> {
    let f = |beta: f64| -> Result<f64> {
        let params = complete_transform(spec, 1.0, beta)?;
        let hat = transform(spec, params)?;
        let v = gauss_expect_kinked(
            |x| {
                let d = hat.dphi(x);
                d * d
            },
            &hat.kinks,
            default_rule(),
        )?;
        Ok(v - psi)
    };
    // Bracket a sign change on a uniform grid.
    const GRID: usize = 241;
    let mut prev: Option<(f64, f64)> = None;
    let mut bracket = None;
    for i in 0..GRID {
        let beta = -6.0 + 12.0 * i as f64 / (GRID - 1) as f64;
        let Ok(v) = f(beta) else { continue };
        if let Some((pb, pv)) = prev {
            if pv.signum() != v.signum() {
                bracket = Some((pb, pv, beta, v));
                break;
            }
        }
        prev = Some((beta, v));
    }
    let Some((mut lo, mut flo, mut hi, _)) = bracket else {
        return Err(Error::SolveFailed {
            restarts: 0,
            best_residual: prev.map(|(_, v)| v.abs()).unwrap_or(f64::INFINITY),
            best_alpha: 1.0,
            best_beta: prev.map(|(b, _)| b).unwrap_or(f64::NAN),
            history: format!(
                "homogeneous 1-D solve: no sign change of C'(1) - {psi} for beta in [-6, 6]"
            ),
        });
    };
    let mut beta = 0.5 * (lo + hi);
    for _ in 0..200 {
        beta = 0.5 * (lo + hi);
        let v = f(beta)?;
        if v.abs() <= opts.tol {
            break;
        }
        if v.signum() == flo.signum() {
            lo = beta;
            flo = v;
        } else {
            hi = beta;
        }
    }
    let params = complete_transform(spec, 1.0, beta)?;
    let (rq, rc) = condition_residuals(spec, params, 1.0, psi)?;
    if rc.abs() > opts.tol {
        return Err(Error::SolveFailed {
            restarts: 0,
            best_residual: rc.abs(),
            best_alpha: 1.0,
            best_beta: beta,
            history: "homogeneous 1-D bisection stalled".into(),
        });
    }
    Ok(SolveResult {
        params,
        residual_q: rq,
        residual_c: rc,
        starts_used: 1,
    })
}
