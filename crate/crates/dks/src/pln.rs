//! Per-Location Normalization (PLN) of input feature maps.
//!
//! A feature map is a (channels × locations) matrix whose columns are the
//! per-location feature vectors. PLN appends one extra channel and rescales
//! every column so its dimension-normalized squared norm is exactly 1, which
//! puts network inputs on the q = 1 manifold that the map analysis assumes.
//!
//! Two variants are provided: the data-dependent default, whose extra channel
//! carries the root-mean-square column norm (scale invariant), and a
//! constant-channel variant that is invertible location-by-location.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A (channels × locations) feature map with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// Column-per-location data.
    pub data: DMatrix<f64>,
}

impl FeatureMap {
    /// Wraps a matrix, checking that it is non-empty and finite.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::ShapeMismatch(
                "feature map must have at least one channel and one location".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature map contains non-finite entries".into()));
        }
        Ok(FeatureMap { data })
    }

    /// Channel count k.
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    /// Location count ℓ.
    pub fn locations(&self) -> usize {
        self.data.ncols()
    }
}

/// Data-dependent PLN: appends the channel
/// `e = ((1/k)·mean_j ‖x_j‖²)^{1/2}` and rescales each column to
/// `√(k+1) · [x_i; e] / √(‖x_i‖² + e²)`, so each output column has squared
/// norm k + 1.
///
/// The result is invariant to rescaling the whole input.
///
/// # Errors
/// An all-zero input carries no norm information and is rejected.
pub fn pln(x: &FeatureMap) -> Result<FeatureMap> {
    let k = x.channels();
    let l = x.locations();
    let mean_sq: f64 = x
        .data
        .column_iter()
        .map(|c| c.norm_squared())
        .sum::<f64>()
        / l as f64;
    let e = (mean_sq / k as f64).sqrt();
    if !(e > 0.0) {
        return Err(Error::Domain(
            "all-zero feature map cannot be normalized (no norm information)".into(),
        ));
    }
    Ok(FeatureMap {
        data: append_and_normalize(&x.data, e),
    })
}

/// Constant-channel PLN: per location, `x ↦ √(k+1)·[x; c]/√(‖x‖² + c²)`.
///
/// Unlike [`pln`] this loses no information: the input is recoverable with
/// [`pln_const_invert`].
///
/// # Errors
/// `c` must be positive and finite (c = 0 would be non-invertible at the
/// zero location vector).
pub fn pln_const(x: &FeatureMap, c: f64) -> Result<FeatureMap> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!(
            "constant channel value c = {c} must be positive and finite"
        )));
    }
    Ok(FeatureMap {
        data: append_and_normalize(&x.data, c),
    })
}

fn append_and_normalize(x: &DMatrix<f64>, extra: f64) -> DMatrix<f64> {
    let k = x.nrows();
    let scale_dim = ((k + 1) as f64).sqrt();
    DMatrix::from_fn(k + 1, x.ncols(), |r, j| {
        let col = x.column(j);
        let s = scale_dim / (col.norm_squared() + extra * extra).sqrt();
        if r < k {
            s * col[r]
        } else {
            s * extra
        }
    })
}

/// Inverts [`pln_const`]: per column, `x = v[..k] · (c / v_last)`.
///
/// # Errors
/// A zero last entry (which [`pln_const`] never produces for c > 0) is a
/// domain error; empty input is a shape error.
pub fn pln_const_invert(v: &FeatureMap, c: f64) -> Result<FeatureMap> {
    let rows = v.channels();
    if rows < 2 {
        return Err(Error::ShapeMismatch(
            "constant-PLN output must have at least 2 channels".into(),
        ));
    }
    let k = rows - 1;
    let mut out = DMatrix::zeros(k, v.locations());
    for j in 0..v.locations() {
        let last = v.data[(k, j)];
        if last == 0.0 {
            return Err(Error::Domain(format!(
                "column {j} has zero in the constant channel; not a pln_const output"
            )));
        }
        let s = c / last;
        for r in 0..k {
            out[(r, j)] = s * v.data[(r, j)];
        }
    }
    FeatureMap::new(out)
}

// ---------------------------------------------------------------------------
// CSV I/O (channels as rows)
// ---------------------------------------------------------------------------

/// Parses a channels-as-rows CSV document into a feature map.
///
/// # Errors
/// Ragged rows, non-numeric fields and empty documents are rejected.
pub fn read_csv(text: &str) -> Result<FeatureMap> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Domain(format!(
                        "line {}: '{}' is not a number",
                        lineno + 1,
                        f.trim()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::ShapeMismatch(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::ShapeMismatch("empty CSV document".into()));
    }
    let k = rows.len();
    let l = rows[0].len();
    FeatureMap::new(DMatrix::from_fn(k, l, |r, c| rows[r][c]))
}

/// Serializes a feature map as channels-as-rows CSV with full precision.
pub fn write_csv(x: &FeatureMap) -> String {
    let mut out = String::new();
    for r in 0..x.channels() {
        let row: Vec<String> = (0..x.locations())
            .map(|c| format!("{:.17e}", x.data[(r, c)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
