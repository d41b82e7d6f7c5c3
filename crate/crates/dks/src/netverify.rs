//! Desk-scale empirical verification: small fully-connected networks with
//! chosen initialization and (transformed) activations, empirical q/c
//! statistics against map predictions, and the analytic per-layer NTK via
//! C maps.
//!
//! Delta-initialized convolutions act location-wise like dense layers, so
//! the dense harness is the faithful small-scale analogue of the full
//! architectures; only forward passes at initialization are modeled.

use nalgebra::{DMatrix, DVector};

use crate::activations::ActivationSpec;
use crate::error::{Error, Result};
use crate::init::{rng_from_seed, sample_suo};
use crate::localmaps::{local_c, local_c_deriv, local_q};
use crate::quadrature::C_SNAP_TOL;

/// Initialization scheme of the dense harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Scaled uniform orthogonal weights.
    Suo,
    /// iid `N(0, 1/fan_in)` weights.
    Gaussian,
}

/// A fully-connected network of combined layers `h ↦ φ(W h)` with square
/// weight matrices and zero biases.
#[derive(Debug, Clone)]
pub struct DenseNet {
    /// Uniform layer width.
    pub width: usize,
    /// One square weight matrix per combined layer.
    pub weights: Vec<DMatrix<f64>>,
    /// The activation applied after every affine map.
    pub spec: ActivationSpec,
}

/// Builds a deterministic dense network for `(depth, width, scheme, seed)`.
///
/// `depth = 0` yields the identity network.
pub fn build_dense(
    depth: usize,
    width: usize,
    spec: &ActivationSpec,
    scheme: InitScheme,
    seed: u64,
) -> Result<DenseNet> {
    if width == 0 {
        return Err(Error::Domain("width must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut weights = Vec::with_capacity(depth);
    for _ in 0..depth {
        let w = match scheme {
            InitScheme::Suo => sample_suo(width, width, &mut rng)?,
            InitScheme::Gaussian => {
                let std = (width as f64).sqrt().recip();
                let suo_like = DMatrix::from_fn(width, width, |_, _| {
                    use rand::Rng as _;
                    let n = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
                    std * rng.sample(n)
                });
                suo_like
            }
        };
        weights.push(w);
    }
    Ok(DenseNet {
        width,
        weights,
        spec: spec.clone(),
    })
}

impl DenseNet {
    /// Number of combined layers.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Runs the forward pass, returning the post-activation vector of every
    /// combined layer (length = depth; empty for the identity network).
    ///
    /// # Errors
    /// The input dimension must equal the network width.
    pub fn forward_trace(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if x.len() != self.width {
            return Err(Error::ShapeMismatch(format!(
                "input has dimension {}, network width is {}",
                x.len(),
                self.width
            )));
        }
        let mut h = x.clone();
        let mut trace = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let a = w * &h;
            h = a.map(|u| self.spec.phi(u));
            trace.push(h.clone());
        }
        Ok(trace)
    }
}

/// Per-layer empirical q/c statistics over a batch of inputs.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LayerQC {
    /// 1-based combined-layer index.
    pub layer: usize,
    /// Mean of `‖h‖²/width` over inputs.
    pub q_mean: f64,
    /// Standard deviation of `‖h‖²/width` over inputs.
    pub q_std: f64,
    /// Mean pairwise cosine similarity over input pairs.
    pub c_mean: f64,
}

/// Measures per-layer empirical q values (mean and standard deviation of the
/// dimension-normalized squared norm) and mean pairwise cosine similarities.
///
/// The reduction order is fixed (inputs, then pairs, in index order), so
/// results are bit-deterministic for a given network and batch.
pub fn empirical_qc(net: &DenseNet, inputs: &[DVector<f64>]) -> Result<Vec<LayerQC>> {
    if inputs.is_empty() {
        return Err(Error::Domain("empirical_qc needs at least one input".into()));
    }
    let traces: Vec<Vec<DVector<f64>>> = inputs
        .iter()
        .map(|x| net.forward_trace(x))
        .collect::<Result<_>>()?;
    let n = inputs.len() as f64;
    let mut out = Vec::with_capacity(net.depth());
    for layer in 0..net.depth() {
        let qs: Vec<f64> = traces
            .iter()
            .map(|t| t[layer].norm_squared() / net.width as f64)
            .collect();
        let q_mean = qs.iter().sum::<f64>() / n;
        let q_var = qs.iter().map(|q| (q - q_mean).powi(2)).sum::<f64>() / n;
        let mut c_sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..traces.len() {
            for b in (a + 1)..traces.len() {
                let ha = &traces[a][layer];
                let hb = &traces[b][layer];
                let denom = ha.norm() * hb.norm();
                if denom > 0.0 {
                    c_sum += ha.dot(hb) / denom;
                    pairs += 1;
                }
            }
        }
        out.push(LayerQC {
            layer: layer + 1,
            q_mean,
            q_std: q_var.sqrt(),
            c_mean: if pairs > 0 { c_sum / pairs as f64 } else { 1.0 },
        });
    }
    Ok(out)
}

/// Per-layer analytic NTK values for a pair of inputs with initial cosine
/// similarity `c0`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct NtkResult {
    /// The input c value.
    pub c0: f64,
    /// The output-layer q value `q_D`.
    pub q_output: f64,
    /// `Θ_i` for `i = 1..D`.
    pub theta: Vec<f64>,
}

/// Agreement tolerance of the two NTK computation routes.
pub const NTK_CROSS_CHECK_TOL: f64 = 1e-8;

/// Computes the per-layer NTK contributions
/// `Θ_i = q_D · C_{g_i}(c0) · C′_{h_i}(C_{g_i}(c0))`, where `g_i` is the map
/// from the input to layer i and `h_i` the map from layer i to the output.
///
/// `C′_{h_i}` is computed two ways — as the chain-rule product of local C-map
/// derivatives along the trajectory, and by high-order finite differences of
/// the composed suffix map — and the routes must agree within 1e-8. The
/// finite-difference cross-check is skipped for activations without a second
/// derivative, whose C maps are not smooth enough near `c = 1` for the
/// stencils to be trustworthy.
///
/// # Errors
/// `|c0| ≤ 1` and `q0 > 0` are required; route disagreement is reported.
pub fn ntk_per_layer(
    spec: &ActivationSpec,
    depth: usize,
    c0: f64,
    q0: f64,
) -> Result<NtkResult> {
    if !(-1.0..=1.0).contains(&c0) {
        return Err(Error::Domain(format!("c0 = {c0} outside [-1, 1]")));
    }
    if !(q0 > 0.0 && q0.is_finite()) {
        return Err(Error::Domain(format!("q0 = {q0} must be positive")));
    }
    if depth == 0 {
        return Err(Error::Domain("NTK needs at least one layer".into()));
    }
    // q entering layer j (index j-1) and the c trajectory c_0..c_D.
    let mut q_in = Vec::with_capacity(depth);
    let mut c_traj = Vec::with_capacity(depth + 1);
    let mut q = q0;
    let mut c = c0;
    c_traj.push(c);
    for _ in 0..depth {
        q_in.push(q);
        c = local_c(spec, c, q, q)?.clamp(-1.0, 1.0);
        q = local_q(spec, q)?;
        c_traj.push(c);
    }
    let q_output = q;

    // Chain-rule route: suffix products of local derivatives.
    // suffix_deriv[i] = Π_{j=i+1..D} C′_j(c_{j-1}); suffix_deriv[D] = 1.
    let mut suffix_deriv = vec![1.0; depth + 1];
    for i in (0..depth).rev() {
        let d = local_c_deriv(spec, c_traj[i].clamp(-1.0, 1.0), q_in[i], 1)?;
        suffix_deriv[i] = d * suffix_deriv[i + 1];
    }

    // Finite-difference route on the composed suffix map. Skipped for
    // activations without a second derivative: their C maps have unbounded
    // higher derivatives near c = 1 (e.g. the RELU family), which invalidates
    // the error model of the finite-difference stencils.
    if spec.d2phi.is_some() {
        for i in 1..=depth {
            let fd = suffix_map_derivative(spec, &q_in, i, c_traj[i])?;
            let chain = suffix_deriv[i];
            let scale = chain.abs().max(1.0);
            if (fd - chain).abs() > NTK_CROSS_CHECK_TOL * scale {
                return Err(Error::Domain(format!(
                    "NTK cross-check failed at layer {i}: chain-rule {chain:.12e} vs finite-difference {fd:.12e}"
                )));
            }
        }
    }

    let theta = (1..=depth)
        .map(|i| q_output * c_traj[i] * suffix_deriv[i])
        .collect();
    Ok(NtkResult {
        c0,
        q_output,
        theta,
    })
}

/// Value of the suffix map `C_D ∘ … ∘ C_{i+1}` starting at `c`.
fn suffix_map_value(spec: &ActivationSpec, q_in: &[f64], i: usize, c: f64) -> Result<f64> {
    let mut c = c.clamp(-1.0, 1.0);
    for &q in &q_in[i..] {
        c = local_c(spec, c, q, q)?.clamp(-1.0, 1.0);
    }
    Ok(c)
}

/// Fourth-order finite-difference derivative of the suffix map at `x`,
/// switching to one-sided stencils near the domain boundary.
fn suffix_map_derivative(spec: &ActivationSpec, q_in: &[f64], i: usize, x: f64) -> Result<f64> {
    let h = 1e-3;
    let f = |c: f64| suffix_map_value(spec, q_in, i, c);
    // Keep a margin beyond the degenerate-correlation snap region.
    let snap = 10.0 * C_SNAP_TOL;
    if x + 2.0 * h <= 1.0 - snap && x - 2.0 * h >= -1.0 + snap {
        Ok((-f(x + 2.0 * h)? + 8.0 * f(x + h)? - 8.0 * f(x - h)? + f(x - 2.0 * h)?) / (12.0 * h))
    } else if x > 0.0 {
        // One-sided downward, fourth order.
        Ok((25.0 * f(x)? - 48.0 * f(x - h)? + 36.0 * f(x - 2.0 * h)? - 16.0 * f(x - 3.0 * h)?
            + 3.0 * f(x - 4.0 * h)?)
            / (12.0 * h))
    } else {
        // One-sided upward, fourth order.
        Ok((-25.0 * f(x)? + 48.0 * f(x + h)? - 36.0 * f(x + 2.0 * h)? + 16.0 * f(x + 3.0 * h)?
            - 3.0 * f(x + 4.0 * h)?)
            / (12.0 * h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::registry_get;

    #[test]
    fn identity_suo_depth1_is_orthogonal_map() {
        let id = registry_get("identity").unwrap();
        let net = build_dense(1, 4, &id, InitScheme::Suo, 9).unwrap();
        let x = DVector::from_row_slice(&[1.0, -2.0, 0.5, 3.0]);
        let trace = net.forward_trace(&x).unwrap();
        assert_eq!(trace.len(), 1);
        assert!((trace[0].norm() - x.norm()).abs() < 1e-10);
    }

    #[test]
    fn depth_zero_identity_network() {
        let id = registry_get("identity").unwrap();
        let net = build_dense(0, 4, &id, InitScheme::Suo, 9).unwrap();
        let x = DVector::from_row_slice(&[1.0, -2.0, 0.5, 3.0]);
        assert!(net.forward_trace(&x).unwrap().is_empty());
    }

    #[test]
    fn identity_suo_q_exactly_one() {
        let id = registry_get("identity").unwrap();
        let net = build_dense(5, 8, &id, InitScheme::Suo, 3).unwrap();
        let mut x = DVector::from_fn(8, |i, _| (i as f64 - 3.5) / 2.0);
        x *= (8.0 / x.norm_squared()).sqrt();
        let y = x.map(|v| -v);
        let stats = empirical_qc(&net, &[x, y]).unwrap();
        for s in &stats {
            assert!((s.q_mean - 1.0).abs() < 1e-10, "layer {}: q = {}", s.layer, s.q_mean);
            assert!(s.q_std < 1e-10);
            assert!((s.c_mean + 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn determinism_bit_for_bit() {
        let spec = registry_get("tanh").unwrap();
        let x = DVector::from_fn(16, |i, _| ((i * 7 % 5) as f64 - 2.0) / 3.0);
        let a = {
            let net = build_dense(3, 16, &spec, InitScheme::Gaussian, 123).unwrap();
            empirical_qc(&net, &[x.clone()]).unwrap()
        };
        let b = {
            let net = build_dense(3, 16, &spec, InitScheme::Gaussian, 123).unwrap();
            empirical_qc(&net, &[x]).unwrap()
        };
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.q_mean.to_bits(), t.q_mean.to_bits());
        }
    }

    #[test]
    fn identity_ntk_is_c0() {
        let id = registry_get("identity").unwrap();
        let r = ntk_per_layer(&id, 5, 0.4, 1.0).unwrap();
        assert!((r.q_output - 1.0).abs() < 1e-9);
        for t in &r.theta {
            assert!((t - 0.4).abs() < 1e-8, "theta = {t}");
        }
    }

    #[test]
    fn ntk_rejects_bad_inputs() {
        let id = registry_get("identity").unwrap();
        assert!(ntk_per_layer(&id, 5, 1.5, 1.0).is_err());
        assert!(ntk_per_layer(&id, 5, 0.4, -1.0).is_err());
        assert!(ntk_per_layer(&id, 0, 0.4, 1.0).is_err());
    }
}
