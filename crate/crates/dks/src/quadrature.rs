//! High-precision Gaussian expectations via fixed-order Gauss-Legendre quadrature.
//!
//! All Q/C map quantities in this crate reduce to expectations of the form
//! `E[h(x)]` or `E[h(x, y)]` with `x, y ~ N(0, 1)` independent. These are
//! computed by Gauss-Legendre quadrature on the truncated interval `[-10, 10]`
//! with the standard-normal density folded in at evaluation time; the normal
//! mass outside the interval is far below 1e-12 and is ignored.
//!
//! Rules are deterministic and cached: the default 1-D rule (order 10,000,
//! overridable through the `KS_QUAD_ORDER` environment variable, read once) and
//! the default 2-D axis rule (600 nodes per axis) are built on first use and
//! shared immutably afterwards.
//!
//! # Example
//! ```
//! use dks::quadrature::{gauss_expect, QuadRule};
//!
//! let rule = QuadRule::new(200).unwrap();
//! // E[x^2] = 1 for a standard normal.
//! let second_moment = gauss_expect(|x| x * x, &rule).unwrap();
//! assert!((second_moment - 1.0).abs() < 1e-10);
//! ```

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Lower end of the truncated integration interval.
pub const INTERVAL_LO: f64 = -10.0;
/// Upper end of the truncated integration interval.
pub const INTERVAL_HI: f64 = 10.0;

/// Default number of nodes for 1-D expectations.
pub const DEFAULT_ORDER_1D: usize = 10_000;
/// Default number of nodes per axis for 2-D (tensor-product) expectations.
pub const DEFAULT_ORDER_2D: usize = 600;

/// Snap tolerance: correlations within this distance of ±1 use the exact
/// degenerate 1-D integral instead of the 2-D tensor product, avoiding
/// catastrophic cancellation in `sqrt(1 - c^2)`.
pub const C_SNAP_TOL: f64 = 1e-9;

/// A fixed-order Gauss-Legendre quadrature rule on `[-10, 10]`.
///
/// `nodes` are strictly increasing abscissae and `weights` the matching
/// positive Gauss-Legendre weights (already scaled to the interval). The
/// standard-normal density is *not* baked into `weights`; it is applied at
/// evaluation time (a density-premultiplied copy is cached privately for
/// speed).
#[derive(Debug, Clone)]
pub struct QuadRule {
    /// Number of nodes.
    pub order: usize,
    /// Strictly increasing abscissae in `[-10, 10]`.
    pub nodes: Vec<f64>,
    /// Positive Gauss-Legendre weights on the interval.
    pub weights: Vec<f64>,
    /// `weights[i] * pdf(nodes[i])` — the effective weights for expectations.
    gauss_weights: Vec<f64>,
}

/// Standard normal probability density.
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Evaluates the Legendre polynomial `P_n` and its derivative at `x` by the
/// three-term recurrence.
fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0; // P_0
    let mut p = x; // P_1
    for k in 2..=n {
        let kf = k as f64;
        let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = p_next;
    }
    // P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1)
    let dp = (n as f64) * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

impl QuadRule {
    /// Builds a Gauss-Legendre rule with `order` nodes on `[-10, 10]`.
    ///
    /// Nodes are found by Newton iteration on `P_n` from the Chebyshev-based
    /// initial guesses; only the lower half is computed, the rest follows by
    /// symmetry.
    ///
    /// # Errors
    /// `order == 0` is a domain error.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("quadrature order must be positive".into()));
        }
        let n = order;
        let mut ref_nodes = vec![0.0f64; n];
        let mut ref_weights = vec![0.0f64; n];
        let half = n.div_ceil(2);
        for i in 0..half {
            // Initial guess for the i-th root (descending order).
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_and_deriv(n, x);
                dp = d;
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // x is the i-th largest root; store ascending.
            ref_nodes[n - 1 - i] = x;
            ref_nodes[i] = -x;
            ref_weights[n - 1 - i] = w;
            ref_weights[i] = w;
        }
        if n % 2 == 1 {
            ref_nodes[n / 2] = 0.0;
        }
        let scale = (INTERVAL_HI - INTERVAL_LO) / 2.0;
        let mid = (INTERVAL_HI + INTERVAL_LO) / 2.0;
        let nodes: Vec<f64> = ref_nodes.iter().map(|&x| mid + scale * x).collect();
        let weights: Vec<f64> = ref_weights.iter().map(|&w| w * scale).collect();
        let gauss_weights: Vec<f64> = nodes
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| w * normal_pdf(x))
            .collect();
        Ok(QuadRule {
            order,
            nodes,
            weights,
            gauss_weights,
        })
    }

    /// Effective weights `w_i * pdf(x_i)` for Gaussian expectations.
    pub fn gauss_weights(&self) -> &[f64] {
        &self.gauss_weights
    }
}

/// The shared default 1-D rule (order `KS_QUAD_ORDER` or 10,000).
pub fn default_rule() -> &'static QuadRule {
    static RULE: OnceLock<QuadRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let order = std::env::var("KS_QUAD_ORDER")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(DEFAULT_ORDER_1D);
        QuadRule::new(order).expect("default quadrature rule")
    })
}

/// The shared default per-axis rule for 2-D tensor-product expectations.
pub fn default_rule_2d() -> &'static QuadRule {
    static RULE: OnceLock<QuadRule> = OnceLock::new();
    RULE.get_or_init(|| QuadRule::new(DEFAULT_ORDER_2D).expect("default 2-D quadrature rule"))
}

/// Computes `E_{x ~ N(0,1)}[h(x)]` with the given rule.
///
/// Deterministic for a fixed rule.
///
/// # Errors
/// Returns [`Error::NonFiniteIntegrand`] identifying the node if `h` produces
/// a non-finite value anywhere on the grid.
pub fn gauss_expect<F: Fn(f64) -> f64>(h: F, rule: &QuadRule) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (&x, &wg)) in rule.nodes.iter().zip(rule.gauss_weights()).enumerate() {
        let v = h(x);
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand {
                index: i,
                abscissa: x,
                value: v,
            });
        }
        acc += wg * v;
    }
    Ok(acc)
}

/// Sorted, deduplicated kink locations strictly inside the interval.
fn interior_kinks(kinks: &[f64]) -> Vec<f64> {
    let mut ks: Vec<f64> = kinks
        .iter()
        .copied()
        .filter(|k| k.is_finite() && *k > INTERVAL_LO + 1e-9 && *k < INTERVAL_HI - 1e-9)
        .collect();
    ks.sort_by(|a, b| a.partial_cmp(b).expect("finite kinks"));
    ks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    ks
}

/// Appends the node/weight pairs (density folded in) of the rule applied
/// piecewise to the interval split at `kinks`.
fn piecewise_points(rule: &QuadRule, kinks: &[f64], out: &mut Vec<(f64, f64)>) {
    let ks = interior_kinks(kinks);
    if ks.is_empty() {
        out.extend(rule.nodes.iter().zip(rule.gauss_weights()).map(|(&x, &w)| (x, w)));
        return;
    }
    let full = INTERVAL_HI - INTERVAL_LO;
    let mut lo = INTERVAL_LO;
    for hi in ks.into_iter().chain(std::iter::once(INTERVAL_HI)) {
        let len = hi - lo;
        if len > 0.0 {
            for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                let t = (x - INTERVAL_LO) / full;
                let xx = lo + t * len;
                out.push((xx, w * (len / full) * normal_pdf(xx)));
            }
        }
        lo = hi;
    }
}

/// Like [`gauss_expect`], but splits the integration interval at the given
/// kink locations of `h`, restoring spectral accuracy for piecewise-smooth
/// integrands (RELU family and friends).
pub fn gauss_expect_kinked<F: Fn(f64) -> f64>(
    h: F,
    kinks: &[f64],
    rule: &QuadRule,
) -> Result<f64> {
    if interior_kinks(kinks).is_empty() {
        return gauss_expect(h, rule);
    }
    let mut pts = Vec::new();
    piecewise_points(rule, kinks, &mut pts);
    let mut acc = 0.0;
    for (i, &(x, w)) in pts.iter().enumerate() {
        let v = h(x);
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand {
                index: i,
                abscissa: x,
                value: v,
            });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Computes `Γ_φ(c, q1, q2) = E[φ(√q1 x) · φ(√q2 (c x + √(1-c²) y))]` with
/// `x, y ~ N(0, 1)` independent, by tensor-product quadrature.
///
/// For `c` within [`C_SNAP_TOL`] of ±1 the inner argument degenerates to
/// `±√q2 x` and the computation falls back to an exact 1-D integral.
///
/// # Errors
/// `|c| > 1` or a non-positive `q` is a domain error; non-finite integrand
/// values are reported with the offending node.
pub fn gamma_expect<F: Fn(f64) -> f64>(
    phi: &F,
    c: f64,
    q1: f64,
    q2: f64,
    rule: &QuadRule,
) -> Result<f64> {
    gamma_expect_pair(phi, phi, c, q1, q2, rule)
}

/// Like [`gamma_expect`] but with distinct functions on the two slots:
/// `E[a(√q1 x) · b(√q2 (c x + √(1-c²) y))]`.
///
/// Needed by derivative formulas, where both slots carry `φ⁽ⁱ⁾` of possibly
/// different transformed specs than the forward map.
pub fn gamma_expect_pair<A: Fn(f64) -> f64, B: Fn(f64) -> f64>(
    a: &A,
    b: &B,
    c: f64,
    q1: f64,
    q2: f64,
    rule: &QuadRule,
) -> Result<f64> {
    gamma_expect_pair_kinked(a, b, &[], &[], c, q1, q2, rule)
}

/// Like [`gamma_expect_pair`], but with known kink locations for each slot
/// (in the function's own input space), used to split the quadrature grids
/// so piecewise-smooth activations keep spectral accuracy.
///
/// The outer axis is split where `a(√q1 x)` is non-smooth; the inner axis is
/// split, per outer node, where `b(√q2 (c x + √(1-c²) y))` is non-smooth in
/// `y`. The near-degenerate (`|c| ≈ 1`) fallback splits its 1-D grid at the
/// union of both slots' kinks so it agrees exactly with the matching 1-D
/// moments computed on the same rule.
#[allow(clippy::too_many_arguments)]
pub fn gamma_expect_pair_kinked<A: Fn(f64) -> f64, B: Fn(f64) -> f64>(
    a: &A,
    b: &B,
    a_kinks: &[f64],
    b_kinks: &[f64],
    c: f64,
    q1: f64,
    q2: f64,
    rule: &QuadRule,
) -> Result<f64> {
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::Domain(format!(
            "correlation c = {c} outside [-1, 1]"
        )));
    }
    if q1 <= 0.0 || q2 <= 0.0 {
        return Err(Error::Domain(format!(
            "q values must be positive (got q1 = {q1}, q2 = {q2})"
        )));
    }
    let s1 = q1.sqrt();
    let s2 = q2.sqrt();
    if 1.0 - c.abs() < C_SNAP_TOL {
        let sign = c.signum();
        let mut combined: Vec<f64> = a_kinks.iter().map(|&k| k / s1).collect();
        combined.extend(b_kinks.iter().map(|&k| sign * k / s2));
        return gauss_expect_kinked(|x| a(s1 * x) * b(sign * s2 * x), &combined, rule);
    }
    let s = (1.0 - c * c).sqrt();
    // Outer grid: split where a(√q1 x) is non-smooth.
    let a_scaled: Vec<f64> = a_kinks.iter().map(|&k| k / s1).collect();
    let mut outer_pts = Vec::new();
    piecewise_points(rule, &a_scaled, &mut outer_pts);
    let mut inner_pts = Vec::new();
    let mut inner_kinks = Vec::with_capacity(b_kinks.len());
    let mut acc = 0.0;
    for (i, &(x, wx)) in outer_pts.iter().enumerate() {
        let av = a(s1 * x);
        if !av.is_finite() {
            return Err(Error::NonFiniteIntegrand {
                index: i,
                abscissa: x,
                value: av,
            });
        }
        // Inner grid: split where the argument of b crosses a b-kink in y.
        inner_kinks.clear();
        inner_kinks.extend(b_kinks.iter().map(|&k| (k / s2 - c * x) / s));
        inner_pts.clear();
        piecewise_points(rule, &inner_kinks, &mut inner_pts);
        let base = s2 * c * x;
        let mut inner = 0.0;
        for &(y, wy) in &inner_pts {
            inner += wy * b(base + s2 * s * y);
        }
        if !inner.is_finite() {
            return Err(Error::NonFiniteIntegrand {
                index: i,
                abscissa: x,
                value: inner,
            });
        }
        acc += wx * av * inner;
    }
    Ok(acc)
}
