//! Registry of scalar activation functions and the DKS scale-and-shift
//! transformation `φ̂(u) = γ(φ(αu + β) + δ)`.
//!
//! Specs are immutable and cheaply cloneable (`Arc`-backed closures), so the
//! same table can be shared across threads and extended with transformed
//! variants without mutating the standard registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Shared scalar function.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// SELU scale constant λ (standard published value).
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU shape constant α (standard published value).
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
/// Default negative slope of leaky-RELU.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// A named scalar activation with first (and optionally second) derivative.
#[derive(Clone)]
pub struct ActivationSpec {
    /// Lower-case identifier (the CLI vocabulary).
    pub name: String,
    /// The activation φ.
    pub phi: ScalarFn,
    /// Its derivative φ′ (defined except on a finite point set).
    pub dphi: ScalarFn,
    /// Second derivative φ″ where available; `None` for kinked activations
    /// (RELU family), whose C-map derivatives are valid for order 1 only.
    pub d2phi: Option<ScalarFn>,
    /// Positively homogeneous of degree 1 (e.g. RELU, leaky-RELU, identity).
    pub homogeneous: bool,
    /// Input locations where φ (or a derivative) is non-smooth. Quadrature
    /// splits its interval at these points, restoring spectral accuracy for
    /// piecewise-smooth activations.
    pub kinks: Vec<f64>,
}

impl std::fmt::Debug for ActivationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationSpec")
            .field("name", &self.name)
            .field("homogeneous", &self.homogeneous)
            .field("has_d2phi", &self.d2phi.is_some())
            .field("kinks", &self.kinks)
            .finish()
    }
}

impl ActivationSpec {
    /// Convenience constructor from plain function pointers / closures.
    pub fn new<P, D>(name: &str, phi: P, dphi: D, homogeneous: bool) -> Self
    where
        P: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        ActivationSpec {
            name: name.to_string(),
            phi: Arc::new(phi),
            dphi: Arc::new(dphi),
            d2phi: None,
            homogeneous,
            kinks: Vec::new(),
        }
    }

    /// Registers non-smooth input locations for interval-splitting quadrature.
    pub fn with_kinks(mut self, kinks: Vec<f64>) -> Self {
        self.kinks = kinks;
        self
    }

    /// Adds a second derivative to the spec.
    pub fn with_d2<D2>(mut self, d2phi: D2) -> Self
    where
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.d2phi = Some(Arc::new(d2phi));
        self
    }

    /// Evaluates φ.
    pub fn phi(&self, u: f64) -> f64 {
        (self.phi)(u)
    }

    /// Evaluates φ′.
    pub fn dphi(&self, u: f64) -> f64 {
        (self.dphi)(u)
    }
}

/// The four constants of a transformed activation `γ(φ(αu + β) + δ)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformParams {
    /// Input scale (non-zero).
    pub alpha: f64,
    /// Input shift.
    pub beta: f64,
    /// Output scale (positive).
    pub gamma: f64,
    /// Output shift.
    pub delta: f64,
}

impl TransformParams {
    /// The identity transform (1, 0, 1, 0).
    pub fn identity() -> Self {
        TransformParams {
            alpha: 1.0,
            beta: 0.0,
            gamma: 1.0,
            delta: 0.0,
        }
    }

    /// Checks the type invariants: α ≠ 0, γ > 0, all finite.
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0.0 || !self.alpha.is_finite() {
            return Err(Error::Domain(format!(
                "transform input scale alpha = {} must be finite and non-zero",
                self.alpha
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain(format!(
                "transform output scale gamma = {} must be finite and positive",
                self.gamma
            )));
        }
        if !self.beta.is_finite() || !self.delta.is_finite() {
            return Err(Error::Domain("transform shifts must be finite".into()));
        }
        Ok(())
    }
}

/// Applies the scale-and-shift transform, producing a new spec named
/// `"<name>*"` with `φ̂(u) = γ(φ(αu + β) + δ)` and `φ̂′(u) = αγ φ′(αu + β)`.
///
/// The homogeneous flag of the result is always `false`: the shifted function
/// is not positively homogeneous in general.
pub fn transform(spec: &ActivationSpec, p: TransformParams) -> Result<ActivationSpec> {
    p.validate()?;
    let TransformParams {
        alpha,
        beta,
        gamma,
        delta,
    } = p;
    let phi = spec.phi.clone();
    let dphi = spec.dphi.clone();
    let d2phi = spec.d2phi.clone();
    let mut kinks: Vec<f64> = spec.kinks.iter().map(|&k| (k - beta) / alpha).collect();
    kinks.sort_by(|a, b| a.partial_cmp(b).expect("finite kinks"));
    Ok(ActivationSpec {
        name: format!("{}*", spec.name),
        phi: Arc::new(move |u| gamma * (phi(alpha * u + beta) + delta)),
        dphi: Arc::new(move |u| alpha * gamma * dphi(alpha * u + beta)),
        d2phi: d2phi.map(|d2| -> ScalarFn {
            Arc::new(move |u: f64| alpha * alpha * gamma * d2(alpha * u + beta))
        }),
        homogeneous: false,
        kinks,
    })
}

/// Which affine layer absorbs the scale-and-shift constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbsorbSide {
    /// The affine layer *following* the nonlinearity absorbs the output
    /// constants (γ, δ): `W(γx + γδ𝟙) + b = (γW)x + (γδW𝟙 + b)`.
    Output,
    /// The affine layer *preceding* the nonlinearity absorbs the input
    /// constants (α, β): `α(Wx + b) + β𝟙 = (αW)x + (αb + β𝟙)`.
    Input,
}

/// Computes the equivalent affine parameters that absorb one side of a
/// transform, preserving the model class.
///
/// # Errors
/// Shape mismatch between `weights` and `bias`.
pub fn equivalent_parameters(
    p: TransformParams,
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
    side: AbsorbSide,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    p.validate()?;
    if weights.nrows() != bias.len() {
        return Err(Error::ShapeMismatch(format!(
            "weight matrix has {} rows but bias has {} entries",
            weights.nrows(),
            bias.len()
        )));
    }
    match side {
        AbsorbSide::Output => {
            let w = weights * p.gamma;
            let ones = DVector::from_element(weights.ncols(), 1.0);
            let b = weights * ones * (p.gamma * p.delta) + bias;
            Ok((w, b))
        }
        AbsorbSide::Input => {
            let w = weights * p.alpha;
            let b = bias * p.alpha + DVector::from_element(bias.len(), p.beta);
            Ok((w, b))
        }
    }
}

/// A table of activation specs, keyed by lower-case name.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    specs: BTreeMap<String, ActivationSpec>,
}

impl Registry {
    /// An empty registry.
    pub fn new() -> Self {
        Registry::default()
    }

    /// The standard registry covering tanh, erf, relu, leaky-relu, softplus,
    /// sigmoid, selu, swish, elu, softsign, bentid and identity.
    pub fn standard() -> Self {
        let mut r = Registry::new();
        r.insert(ActivationSpec::new("identity", |x| x, |_| 1.0, true).with_d2(|_| 0.0));
        r.insert(
            ActivationSpec::new(
                "tanh",
                |x| x.tanh(),
                |x| {
                    let t = x.tanh();
                    1.0 - t * t
                },
                false,
            )
            .with_d2(|x| {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }),
        );
        r.insert(
            ActivationSpec::new(
                "erf",
                erf,
                |x| 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp(),
                false,
            )
            .with_d2(|x| -4.0 * x / std::f64::consts::PI.sqrt() * (-x * x).exp()),
        );
        r.insert(
            ActivationSpec::new(
                "relu",
                |x| x.max(0.0),
                |x| if x > 0.0 { 1.0 } else { 0.0 },
                true,
            )
            .with_kinks(vec![0.0]),
        );
        r.insert(
            ActivationSpec::new(
                "leaky-relu",
                |x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x },
                |x| if x > 0.0 { 1.0 } else { LEAKY_RELU_SLOPE },
                true,
            )
            .with_kinks(vec![0.0]),
        );
        r.insert(
            ActivationSpec::new(
                "softplus",
                // ln(1 + e^x), computed stably for large |x|.
                |x| {
                    if x > 30.0 {
                        x
                    } else {
                        x.exp().ln_1p()
                    }
                },
                |x| sigmoid(x),
                false,
            )
            .with_d2(|x| {
                let s = sigmoid(x);
                s * (1.0 - s)
            }),
        );
        r.insert(
            ActivationSpec::new("sigmoid", sigmoid, |x| {
                let s = sigmoid(x);
                s * (1.0 - s)
            }, false)
            .with_d2(|x| {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }),
        );
        r.insert(
            ActivationSpec::new(
                "selu",
                |x| {
                    if x > 0.0 {
                        SELU_LAMBDA * x
                    } else {
                        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                    }
                },
                |x| {
                    if x > 0.0 {
                        SELU_LAMBDA
                    } else {
                        SELU_LAMBDA * SELU_ALPHA * x.exp()
                    }
                },
                false,
            )
            .with_kinks(vec![0.0]),
        );
        r.insert(
            ActivationSpec::new(
                "swish",
                |x| x * sigmoid(x),
                |x| {
                    let s = sigmoid(x);
                    s + x * s * (1.0 - s)
                },
                false,
            )
            .with_d2(|x| {
                let s = sigmoid(x);
                let ds = s * (1.0 - s);
                2.0 * ds + x * ds * (1.0 - 2.0 * s)
            }),
        );
        r.insert(
            ActivationSpec::new(
                "elu",
                |x| if x > 0.0 { x } else { x.exp_m1() },
                |x| if x > 0.0 { 1.0 } else { x.exp() },
                false,
            )
            .with_kinks(vec![0.0]),
        );
        r.insert(
            ActivationSpec::new(
                "softsign",
                |x| x / (1.0 + x.abs()),
                |x| {
                    let d = 1.0 + x.abs();
                    1.0 / (d * d)
                },
                false,
            )
            .with_d2(|x| {
                let d = 1.0 + x.abs();
                -2.0 * x.signum() / (d * d * d)
            })
            // The second derivative jumps at 0; splitting still helps.
            .with_kinks(vec![0.0]),
        );
        r.insert(
            ActivationSpec::new(
                "bentid",
                |x| x + ((x * x + 1.0).sqrt() - 1.0) / 2.0,
                |x| 1.0 + x / (2.0 * (x * x + 1.0).sqrt()),
                false,
            )
            .with_d2(|x| {
                let s = (x * x + 1.0).sqrt();
                1.0 / (2.0 * s * s * s)
            }),
        );
        r
    }

    /// Inserts (or replaces) a spec under its own name.
    pub fn insert(&mut self, spec: ActivationSpec) {
        self.specs.insert(spec.name.clone(), spec);
    }

    /// Looks a spec up by name.
    ///
    /// # Errors
    /// Unknown names produce an error listing the registered names.
    pub fn get(&self, name: &str) -> Result<&ActivationSpec> {
        self.specs.get(name).ok_or_else(|| Error::UnknownActivation {
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    /// All registered names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.specs.keys().cloned().collect()
    }
}

/// Logistic sigmoid, computed stably on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Looks an activation up in the standard registry (convenience for tests and
/// the CLI).
pub fn registry_get(name: &str) -> Result<ActivationSpec> {
    Registry::standard().get(name).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_lists_registry() {
        let err = registry_get("gelu").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tanh") && msg.contains("relu"), "{msg}");
    }

    #[test]
    fn bentid_matches_definition() {
        let spec = registry_get("bentid").unwrap();
        for x in [-2.0, -0.5, 0.0, 1.3, 4.0] {
            let expected = x + ((x * x + 1.0f64).sqrt() - 1.0) / 2.0;
            assert!((spec.phi(x) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_transform_is_identity() {
        let spec = registry_get("swish").unwrap();
        let t = transform(&spec, TransformParams::identity()).unwrap();
        for u in [-2.0, 0.0, 3.0] {
            assert_eq!(spec.phi(u), t.phi(u));
            assert_eq!(spec.dphi(u), t.dphi(u));
        }
        assert!(!t.homogeneous);
    }

    #[test]
    fn shifted_relu_equals_identity_on_interval() {
        // relu with a large positive input shift undone on the output side is
        // the identity on any bounded interval.
        let spec = registry_get("relu").unwrap();
        let a = 1e3;
        let t = transform(
            &spec,
            TransformParams {
                alpha: 1.0,
                beta: a,
                gamma: 1.0,
                delta: -a,
            },
        )
        .unwrap();
        for u in [-10.0, -3.0, 0.0, 7.5, 10.0] {
            assert!((t.phi(u) - u).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_table_transform_at_zero() {
        let spec = registry_get("tanh").unwrap();
        let p = TransformParams {
            alpha: 0.090438,
            beta: -0.56011,
            gamma: 14.9025,
            delta: 0.50500,
        };
        let t = transform(&spec, p).unwrap();
        let expected = 14.9025 * ((-0.56011f64).tanh() + 0.50500);
        assert!((t.phi(0.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn equivalent_parameters_output_side() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_row_slice(&[0.0]);
        let p = TransformParams {
            alpha: 1.0,
            beta: 0.0,
            gamma: 1.0,
            delta: 1.0,
        };
        let (w2, b2) = equivalent_parameters(p, &w, &b, AbsorbSide::Output).unwrap();
        assert_eq!(w2, w);
        assert_eq!(b2, DVector::from_row_slice(&[2.0]));
    }

    #[test]
    fn equivalent_parameters_output_scale() {
        let w = DMatrix::identity(2, 2);
        let b = DVector::zeros(2);
        let p = TransformParams {
            alpha: 1.0,
            beta: 0.0,
            gamma: 2.0,
            delta: 0.0,
        };
        let (w2, b2) = equivalent_parameters(p, &w, &b, AbsorbSide::Output).unwrap();
        assert_eq!(w2, DMatrix::identity(2, 2) * 2.0);
        assert_eq!(b2, b);
    }

    #[test]
    fn equivalent_parameters_shape_mismatch() {
        let w = DMatrix::identity(2, 2);
        let b = DVector::zeros(3);
        let err =
            equivalent_parameters(TransformParams::identity(), &w, &b, AbsorbSide::Input)
                .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }
}
