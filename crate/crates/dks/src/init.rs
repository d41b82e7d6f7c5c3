//! DKS-compliant parameter initializers: the scaled uniform orthogonal (SUO)
//! matrix sampler and the Gaussian/Orthogonal Delta filter-bank initializers.
//!
//! SUO samples `W = s · (XX^⊤)^{-1/2} X` with `X` iid standard Gaussian and
//! `s = max(√(m/k), 1)`, computed through a symmetric eigendecomposition of
//! the Gram matrix (not QR, whose distribution depends on a sign convention).
//! For `m > k` the factorization is applied to the transpose and the result
//! transposed back, giving orthogonal columns.
//!
//! Delta initializers produce convolutional filter banks that are zero at
//! every spatial offset except the central one, with zero biases, so that a
//! convolution behaves exactly like a dense layer at initialization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use statrs::distribution::Normal;

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a Gram matrix counts as
/// degenerate and the draw is retried.
const GRAM_DEGENERACY_TOL: f64 = 1e-12;

/// Maximum redraw attempts for a degenerate Gram matrix.
const MAX_ATTEMPTS: usize = 3;

/// The deterministic generator used by all samplers (stable within a
/// release so golden tests are bit-reproducible).
pub type InitRng = ChaCha8Rng;

/// Creates the sampler generator for a seed.
pub fn rng_from_seed(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn standard_normal(rng: &mut InitRng) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    rng.sample(n)
}

/// Samples an m×k SUO matrix: `max(√(m/k), 1) · (XX^⊤)^{-1/2} X`.
///
/// For `m ≤ k` the rows are orthonormal (`WW^⊤ = I_m`); for `m > k` the
/// columns are orthogonal with `W^⊤W = (m/k)·I_k`.
///
/// # Errors
/// `m` and `k` must be ≥ 1; a repeatedly degenerate Gram matrix (probability
/// zero in exact arithmetic) is an error after three attempts.
pub fn sample_suo(m: usize, k: usize, rng: &mut InitRng) -> Result<DMatrix<f64>> {
    if m == 0 || k == 0 {
        return Err(Error::Domain(format!(
            "SUO dimensions must be positive (got {m}x{k})"
        )));
    }
    if m > k {
        // Transpose trick: orthonormal rows of the k×m problem become
        // orthonormal columns after transposition; then scale by √(m/k).
        let w = sample_rows_orthonormal(k, m, rng)?;
        return Ok(w.transpose() * (m as f64 / k as f64).sqrt());
    }
    sample_rows_orthonormal(m, k, rng)
}

/// Samples an m×k (m ≤ k) matrix with orthonormal rows as `(XX^⊤)^{-1/2} X`.
fn sample_rows_orthonormal(m: usize, k: usize, rng: &mut InitRng) -> Result<DMatrix<f64>> {
    debug_assert!(m <= k);
    for _ in 0..MAX_ATTEMPTS {
        let x = DMatrix::from_fn(m, k, |_, _| standard_normal(rng));
        let gram = &x * x.transpose();
        let eig = gram.clone().symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        if eig
            .eigenvalues
            .iter()
            .any(|&ev| ev <= GRAM_DEGENERACY_TOL * max_ev)
        {
            continue; // degenerate draw; use fresh randomness
        }
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|ev| ev.sqrt().recip()));
        let gram_inv_sqrt = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        return Ok(gram_inv_sqrt * x);
    }
    Err(Error::Domain(format!(
        "Gram matrix degenerate in {MAX_ATTEMPTS} consecutive {m}x{k} draws"
    )))
}

/// A convolutional filter bank of shape
/// (filter_h, filter_w, in_channels, out_channels) with zero biases.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    /// Filter height (odd).
    pub filter_h: usize,
    /// Filter width (odd).
    pub filter_w: usize,
    /// Input channels k.
    pub in_channels: usize,
    /// Output channels m.
    pub out_channels: usize,
    /// Weights in row-major (h, w, in, out) order.
    pub data: Vec<f64>,
    /// Biases (all zero at initialization).
    pub biases: Vec<f64>,
}

impl FilterBank {
    /// An all-zero bank.
    pub fn zeros(filter_h: usize, filter_w: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if filter_h % 2 == 0 || filter_w % 2 == 0 {
            return Err(Error::Domain(format!(
                "filter extents {filter_h}x{filter_w} must be odd for Delta initialization"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Domain("channel counts must be positive".into()));
        }
        Ok(FilterBank {
            filter_h,
            filter_w,
            in_channels,
            out_channels,
            data: vec![0.0; filter_h * filter_w * in_channels * out_channels],
            biases: vec![0.0; out_channels],
        })
    }

    fn index(&self, h: usize, w: usize, i: usize, o: usize) -> usize {
        ((h * self.filter_w + w) * self.in_channels + i) * self.out_channels + o
    }

    /// Reads one weight.
    pub fn get(&self, h: usize, w: usize, i: usize, o: usize) -> f64 {
        self.data[self.index(h, w, i, o)]
    }

    /// The central spatial offset (0-indexed).
    pub fn center(&self) -> (usize, usize) {
        (self.filter_h / 2, self.filter_w / 2)
    }

    /// The central slice as an (out_channels × in_channels) matrix.
    pub fn central_slice(&self) -> DMatrix<f64> {
        let (ch, cw) = self.center();
        DMatrix::from_fn(self.out_channels, self.in_channels, |o, i| {
            self.get(ch, cw, i, o)
        })
    }

    fn set_central_slice(&mut self, w: &DMatrix<f64>) {
        let (ch, cw) = self.center();
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                let idx = self.index(ch, cw, i, o);
                self.data[idx] = w[(o, i)];
            }
        }
    }

    /// Whether every non-central spatial offset is entirely zero.
    pub fn is_delta(&self) -> bool {
        let (ch, cw) = self.center();
        for h in 0..self.filter_h {
            for w in 0..self.filter_w {
                if (h, w) == (ch, cw) {
                    continue;
                }
                for i in 0..self.in_channels {
                    for o in 0..self.out_channels {
                        if self.get(h, w, i, o) != 0.0 {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Gaussian Delta initialization: the central slice has iid `N(0, 1/k)`
/// entries (k = in_channels); everything else, including biases, is zero.
pub fn gaussian_delta(
    filter_h: usize,
    filter_w: usize,
    in_channels: usize,
    out_channels: usize,
    rng: &mut InitRng,
) -> Result<FilterBank> {
    let mut bank = FilterBank::zeros(filter_h, filter_w, in_channels, out_channels)?;
    let std = (in_channels as f64).sqrt().recip();
    let w = DMatrix::from_fn(out_channels, in_channels, |_, _| std * standard_normal(rng));
    bank.set_central_slice(&w);
    Ok(bank)
}

/// Orthogonal Delta initialization: the central slice is an SUO sample;
/// everything else, including biases, is zero.
pub fn orthogonal_delta(
    filter_h: usize,
    filter_w: usize,
    in_channels: usize,
    out_channels: usize,
    rng: &mut InitRng,
) -> Result<FilterBank> {
    let mut bank = FilterBank::zeros(filter_h, filter_w, in_channels, out_channels)?;
    let w = sample_suo(out_channels, in_channels, rng)?;
    bank.set_central_slice(&w);
    Ok(bank)
}
