//! Local Q/C maps of a combined/nonlinear layer, their derivatives,
//! diagnostic measures, and depth-iteration of sequential maps.
//!
//! For an activation φ and input q value `q`, the local Q map is
//! `Q(q) = E[φ(√q x)²]` and the local C map is
//! `C(c, q1, q2) = Γ_φ(c, q1, q2) / √(Q(q1) Q(q2))` with
//! `Γ_φ(c, q1, q2) = E[φ(√q1 x) φ(√q2 (c x + √(1-c²) y))]`,
//! all expectations over independent standard normals.
//!
//! Unless stated otherwise, diagnostic statistics are computed at the
//! uniform-q convention `q = 1`.

use crate::activations::ActivationSpec;
use crate::error::{Error, Result};
use crate::quadrature::{
    default_rule, default_rule_2d, gamma_expect_pair_kinked, gauss_expect_kinked, C_SNAP_TOL,
};

/// Kink locations of the integrand `h(√q x)` in x, given the kinks of `h`.
fn scaled_kinks(spec: &ActivationSpec, q: f64) -> Vec<f64> {
    let s = q.sqrt();
    spec.kinks.iter().map(|&k| k / s).collect()
}

/// A (q value, c value) pair propagated through maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QCState {
    /// Dimension-normalized squared norm (positive).
    pub q: f64,
    /// Cosine similarity in `[-1, 1]`.
    pub c: f64,
}

impl QCState {
    /// Constructs a state, checking the invariants `q > 0`, `|c| ≤ 1`.
    pub fn new(q: f64, c: f64) -> Result<Self> {
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Domain(format!("q value must be positive (got {q})")));
        }
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("c value {c} outside [-1, 1]")));
        }
        Ok(QCState { q, c })
    }
}

/// Key local map statistics of a layer at input q = 1.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MapStats {
    /// Q(1).
    pub q1: f64,
    /// Q′(1).
    pub dq1: f64,
    /// C(0).
    pub c0: f64,
    /// C′(0).
    pub dc0: f64,
    /// C′(1).
    pub dc1: f64,
}

/// `Q(q) = E[φ(√q x)²]`.
pub fn local_q(spec: &ActivationSpec, q: f64) -> Result<f64> {
    require_positive_q(q)?;
    let s = q.sqrt();
    gauss_expect_kinked(
        |x| {
            let v = spec.phi(s * x);
            v * v
        },
        &scaled_kinks(spec, q),
        default_rule(),
    )
}

/// `Q′(q) = (1/√q) · E[φ(√q x) φ′(√q x) x]`.
pub fn local_q_deriv(spec: &ActivationSpec, q: f64) -> Result<f64> {
    require_positive_q(q)?;
    let s = q.sqrt();
    let e = gauss_expect_kinked(
        |x| spec.phi(s * x) * spec.dphi(s * x) * x,
        &scaled_kinks(spec, q),
        default_rule(),
    )?;
    Ok(e / s)
}

/// `C(c, q1, q2) = Γ_φ(c, q1, q2) / √(Q(q1) Q(q2))`.
///
/// Returns exactly 1 at `c = 1` with `q1 = q2` (the degenerate 1-D integral
/// is numerically identical to the Q map in the denominator).
pub fn local_c(spec: &ActivationSpec, c: f64, q1: f64, q2: f64) -> Result<f64> {
    require_positive_q(q1)?;
    require_positive_q(q2)?;
    let gamma = gamma_expect_pair_kinked(
        &|u| spec.phi(u),
        &|u| spec.phi(u),
        &spec.kinks,
        &spec.kinks,
        c,
        q1,
        q2,
        default_rule_2d(),
    )?;
    let denom = if (q1 - q2).abs() == 0.0 {
        // Use the same degenerate-1-D evaluation as Γ(1, q, q) so that
        // C(1, q, q) is exactly 1.
        let q = local_q_on_2d_axis(spec, q1)?;
        q
    } else {
        (local_q_on_2d_axis(spec, q1)? * local_q_on_2d_axis(spec, q2)?).sqrt()
    };
    if denom <= 0.0 {
        return Err(Error::Domain(format!(
            "activation '{}' has zero output variance at q = {q1}; C map undefined",
            spec.name
        )));
    }
    Ok(gamma / denom)
}

/// Q map evaluated on the 2-D axis rule, so that `local_c`'s numerator and
/// denominator share a quadrature grid and `C(1, q, q) == 1` exactly.
fn local_q_on_2d_axis(spec: &ActivationSpec, q: f64) -> Result<f64> {
    let s = q.sqrt();
    gauss_expect_kinked(
        |x| {
            let v = spec.phi(s * x);
            v * v
        },
        &scaled_kinks(spec, q),
        default_rule_2d(),
    )
}

/// Order of a C-map derivative.
pub fn local_c_deriv(spec: &ActivationSpec, c: f64, q: f64, order: usize) -> Result<f64> {
    require_positive_q(q)?;
    let f: &crate::activations::ScalarFn = match order {
        1 => &spec.dphi,
        2 => spec.d2phi.as_ref().ok_or_else(|| {
            Error::Domain(format!(
                "activation '{}' has no second derivative; C-map derivatives valid for order 1 only",
                spec.name
            ))
        })?,
        _ => {
            return Err(Error::Domain(format!(
                "C-map derivative order must be 1 or 2 (got {order})"
            )))
        }
    };
    let g = gamma_expect_pair_kinked(
        &|u| f(u),
        &|u| f(u),
        &spec.kinks,
        &spec.kinks,
        c,
        q,
        q,
        default_rule_2d(),
    )?;
    let qq = local_q_on_2d_axis(spec, q)?;
    if qq <= 0.0 {
        return Err(Error::Domain(format!(
            "activation '{}' has zero output variance at q = {q}; C map undefined",
            spec.name
        )));
    }
    Ok(q.powi(order as i32) / qq * g)
}

/// `E[φ(√q x)]` — the average unit output, used by `cmap_zero` and the
/// Layer-Norm map.
pub fn avg_unit(spec: &ActivationSpec, q: f64) -> Result<f64> {
    require_positive_q(q)?;
    let s = q.sqrt();
    gauss_expect_kinked(|x| spec.phi(s * x), &scaled_kinks(spec, q), default_rule())
}

/// `C(0) = E[φ(√q x)]² / Q(q)` — always non-negative.
pub fn cmap_zero(spec: &ActivationSpec, q: f64) -> Result<f64> {
    let m = avg_unit(spec, q)?;
    let qq = local_q(spec, q)?;
    if qq <= 0.0 {
        return Err(Error::Domain(format!(
            "activation '{}' has zero output variance at q = {q}; C map undefined",
            spec.name
        )));
    }
    Ok(m * m / qq)
}

/// Squared nonlinearity measure `nl² = 1 − C′(0)` at q = 1.
pub fn nonlinearity_sq(spec: &ActivationSpec) -> Result<f64> {
    Ok(1.0 - local_c_deriv(spec, 0.0, 1.0, 1)?)
}

/// Squared nonaffineness measure `na² = 1 − C′(0)/C′(1)` at q = 1.
pub fn nonaffineness_sq(spec: &ActivationSpec) -> Result<f64> {
    let dc0 = local_c_deriv(spec, 0.0, 1.0, 1)?;
    let dc1 = local_c_deriv(spec, 1.0, 1.0, 1)?;
    if dc1 == 0.0 {
        return Err(Error::Domain(format!(
            "activation '{}' has C'(1) = 0; nonaffineness undefined",
            spec.name
        )));
    }
    Ok(1.0 - dc0 / dc1)
}

/// Computes the [`MapStats`] of a spec at input q = 1.
pub fn map_stats(spec: &ActivationSpec) -> Result<MapStats> {
    Ok(MapStats {
        q1: local_q(spec, 1.0)?,
        dq1: local_q_deriv(spec, 1.0)?,
        c0: cmap_zero(spec, 1.0)?,
        dc0: local_c_deriv(spec, 0.0, 1.0, 1)?,
        dc1: local_c_deriv(spec, 1.0, 1.0, 1)?,
    })
}

/// Bounds on the maximum deviation of a C map from the identity.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DeviationBounds {
    /// Lower bound `¼(1 − C′(0))` on `max |C(c) − c|`.
    pub lower: f64,
    /// Upper bound `2(1 − C′(0))` on `max |C(c) − c|`.
    pub upper_value: f64,
    /// Sharper upper bound `2(C′(1) − 1)`, applicable only when C(0) = 0.
    pub upper_value_from_slope: Option<f64>,
    /// Bound `3(C′(1) − 1)` on `max |C′(c) − 1|`, applicable only when C(0) = 0.
    pub upper_slope: Option<f64>,
}

/// Tolerance below which C(0) is considered exactly zero for the purpose of
/// the slope-form deviation bounds.
pub const C0_ZERO_TOL: f64 = 1e-9;

/// Evaluates the deviation-bound formulas from a layer's [`MapStats`].
pub fn deviation_bounds(stats: &MapStats) -> DeviationBounds {
    let applies = stats.c0.abs() <= C0_ZERO_TOL;
    DeviationBounds {
        lower: 0.25 * (1.0 - stats.dc0),
        upper_value: 2.0 * (1.0 - stats.dc0),
        upper_value_from_slope: applies.then(|| 2.0 * (stats.dc1 - 1.0)),
        upper_slope: applies.then(|| 3.0 * (stats.dc1 - 1.0)),
    }
}

/// Iterates a single combined layer `depth` times from `state`, returning the
/// length-`depth` trajectory of (q, c) states.
///
/// At each layer the c value is mapped through the C map at the layer's input
/// q value, then the q value is mapped through the Q map.
pub fn iterate_sequential(
    spec: &ActivationSpec,
    depth: usize,
    state: QCState,
) -> Result<Vec<QCState>> {
    let mut out = Vec::with_capacity(depth);
    let mut q = state.q;
    let mut c = state.c;
    for _ in 0..depth {
        c = local_c(spec, c, q, q)?.clamp(-1.0, 1.0);
        q = local_q(spec, q)?;
        if !(q > 0.0) {
            return Err(Error::Domain(format!(
                "q value degenerated to {q} while iterating '{}'",
                spec.name
            )));
        }
        out.push(QCState { q, c });
    }
    Ok(out)
}

fn require_positive_q(q: f64) -> Result<()> {
    if q > 0.0 && q.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("q value must be positive (got {q})")))
    }
}

/// Snap guard re-exported for callers that iterate C maps near the boundary.
pub const C_BOUNDARY_SNAP: f64 = C_SNAP_TOL;
