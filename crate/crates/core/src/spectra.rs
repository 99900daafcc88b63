//! Random-matrix utilities: Gaussian data, spectral decompositions,
//! pseudoinverse fits and the Marchenko–Pastur law.

use faer::Mat;
use ndarray::{Array1, Array2, Axis};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

/// Support and point mass of the Marchenko–Pastur law for aspect ratio
/// `lambda = D/N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpParams {
    pub aspect_ratio: f64,
    pub support_low: f64,
    pub support_high: f64,
    pub point_mass_at_zero: f64,
}

fn check_aspect_ratio(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "aspect ratio must be positive and finite, got {lambda}"
        )))
    }
}

pub fn mp_params(lambda: f64) -> Result<MpParams> {
    check_aspect_ratio(lambda)?;
    let root = lambda.sqrt();
    Ok(MpParams {
        aspect_ratio: lambda,
        support_low: (1.0 - root).powi(2),
        support_high: (1.0 + root).powi(2),
        point_mass_at_zero: (1.0 - 1.0 / lambda).max(0.0),
    })
}

impl MpParams {
    /// Continuous part of the density; the atom at zero is not included.
    pub fn density(&self, x: f64) -> f64 {
        let (lo, hi) = (self.support_low, self.support_high);
        if !(x > 0.0 && x >= lo && x <= hi) {
            return 0.0;
        }
        ((hi - x) * (x - lo)).max(0.0).sqrt() / (2.0 * std::f64::consts::PI * self.aspect_ratio * x)
    }

    /// Mass of the continuous part, `min(1, 1/lambda)`.
    pub fn continuous_mass(&self) -> f64 {
        1.0 - self.point_mass_at_zero
    }
}

/// Continuous-part MP density at `x`.
pub fn mp_density(x: f64, lambda: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(format!("density argument must be finite, got {x}")));
    }
    Ok(mp_params(lambda)?.density(x))
}

/// `D×N` matrix of i.i.d. standard normals.
pub fn sample_gaussian_data(n: usize, d: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::domain(format!(
            "data dimensions must be positive, got N={n}, D={d}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    Ok(gaussian_matrix(d, n, 1.0, &mut rng))
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Thin SVD of `Φ/√N` with rank bookkeeping: `Φ/√N = U Λ^{1/2} Vᵀ`, so `Λ`
/// holds the eigenvalues of `ΦΦᵀ/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomp {
    /// `F×r`, orthonormal columns.
    pub left_vectors: Array2<f64>,
    /// Length `r`, sorted descending, all above the rank cutoff.
    pub eigenvalues: Array1<f64>,
    /// `N×r`, orthonormal columns.
    pub right_vectors: Array2<f64>,
    /// `(F, N)` of the decomposed matrix.
    pub dims: (usize, usize),
}

impl SpectralDecomp {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn features(&self) -> usize {
        self.dims.0
    }

    pub fn samples(&self) -> usize {
        self.dims.1
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// `√N · U Λ^{1/2} Vᵀ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scale = (self.samples() as f64).sqrt();
        let mut scaled = self.left_vectors.clone();
        for (mut col, &l) in scaled.axis_iter_mut(Axis(1)).zip(self.eigenvalues.iter()) {
            col *= l.sqrt() * scale;
        }
        scaled.dot(&self.right_vectors.t())
    }

    /// `y Φᵀ (ΦΦᵀ)⁺ = y V Λ^{-1/2} Uᵀ / √N` for a `C×N` target `y`.
    pub fn pseudo_solve(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        if y.ncols() != self.samples() {
            return Err(Error::domain(format!(
                "targets have {} columns but the data has {} samples",
                y.ncols(),
                self.samples()
            )));
        }
        let scale = (self.samples() as f64).sqrt();
        let mut coeffs = y.dot(&self.right_vectors);
        for (mut col, &l) in coeffs.axis_iter_mut(Axis(1)).zip(self.eigenvalues.iter()) {
            col /= l.sqrt() * scale;
        }
        Ok(coeffs.dot(&self.left_vectors.t()))
    }

    /// Projector onto the span of the retained left vectors, `U Uᵀ`.
    pub fn row_space_projector(&self) -> Array2<f64> {
        self.left_vectors.dot(&self.left_vectors.t())
    }
}

/// Eigenvalues below this are treated as zero.
pub fn rank_cutoff(max_eigenvalue: f64, dims: (usize, usize)) -> f64 {
    f64::EPSILON * dims.0.max(dims.1) as f64 * max_eigenvalue
}

pub(crate) fn to_faer(m: &Array2<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Descending order, ties broken by original index.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

pub fn decompose(phi: &Array2<f64>) -> Result<SpectralDecomp> {
    if let Some(bad) = phi.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("matrix has non-finite entry {bad}")));
    }
    let (f, n) = phi.dim();
    let empty = |f, n| SpectralDecomp {
        left_vectors: Array2::zeros((f, 0)),
        eigenvalues: Array1::zeros(0),
        right_vectors: Array2::zeros((n, 0)),
        dims: (f, n),
    };
    if f == 0 || n == 0 {
        return Ok(empty(f, n));
    }

    let scale = 1.0 / (n as f64).sqrt();
    let a = Mat::from_fn(f, n, |i, j| phi[[i, j]] * scale);
    let svd = a.thin_svd();
    let s = svd.s_diagonal();
    let values: Vec<f64> = (0..s.nrows()).map(|i| s.read(i).powi(2)).collect();
    let order = descending_order(&values);
    let max = values[order[0]];
    let cutoff = rank_cutoff(max, (f, n));
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| values[i] > cutoff && values[i] > 0.0)
        .collect();
    if kept.is_empty() {
        return Ok(empty(f, n));
    }

    let (u, v) = (svd.u(), svd.v());
    let left = Array2::from_shape_fn((f, kept.len()), |(i, k)| u.read(i, kept[k]));
    let right = Array2::from_shape_fn((n, kept.len()), |(i, k)| v.read(i, kept[k]));
    let eigenvalues = kept.iter().map(|&i| values[i]).collect();
    Ok(SpectralDecomp {
        left_vectors: left,
        eigenvalues,
        right_vectors: right,
        dims: (f, n),
    })
}

/// Minimum-norm least-squares fit `y Φᵀ (ΦΦᵀ)⁺` for `Φ: F×N`, `y: C×N`.
pub fn pseudo_solve(phi: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if phi.ncols() != y.ncols() {
        return Err(Error::domain(format!(
            "data has {} samples but targets have {} columns",
            phi.ncols(),
            y.ncols()
        )));
    }
    decompose(phi)?.pseudo_solve(y)
}

/// Eigenvalues (descending) of the symmetric tridiagonal matrix with the given
/// diagonal and off-diagonal, by implicit QL with Wilkinson-style shifts.
pub fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if off.len() + 1 != n {
        return Err(Error::domain(format!(
            "off-diagonal must have {} entries, got {}",
            n - 1,
            off.len()
        )));
    }
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);

    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 100 {
                return Err(Error::domain("tridiagonal QL iteration did not converge"));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(|a, b| b.total_cmp(a));
    Ok(d)
}

/// Nonzero eigenvalues of `XXᵀ/N` for a `D×N` standard Gaussian `X`, sampled
/// exactly through the bidiagonal chi model: with `m = min(D,N)` and
/// `n = max(D,N)`, the lower-bidiagonal `B` with diagonal `χ_n, …, χ_{n-m+1}`
/// and subdiagonal `χ_{m-1}, …, χ_1` has `BBᵀ` spectrally equal in law to the
/// `m×m` Gram matrix. Costs `O(m²)` instead of a dense decomposition.
pub fn sample_wishart_eigenvalues(d: usize, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::domain(format!(
            "data dimensions must be positive, got N={n}, D={d}"
        )));
    }
    let m = d.min(n);
    let big = d.max(n);
    let chi = |k: usize, rng: &mut Rng| -> f64 {
        // k >= 1 here
        let x: f64 = ChiSquared::new(k as f64).expect("positive dof").sample(rng);
        x.sqrt()
    };
    let diag_b: Vec<f64> = (0..m).map(|i| chi(big - i, rng)).collect();
    let sub_b: Vec<f64> = (1..m).map(|i| chi(m - i, rng)).collect();

    let diag: Vec<f64> = (0..m)
        .map(|i| diag_b[i].powi(2) + if i > 0 { sub_b[i - 1].powi(2) } else { 0.0 })
        .collect();
    let off: Vec<f64> = (0..m.saturating_sub(1)).map(|i| diag_b[i] * sub_b[i]).collect();
    let scale = 1.0 / n as f64;
    Ok(tridiagonal_eigenvalues(&diag, &off)?
        .into_iter()
        .map(|v| (v * scale).max(0.0))
        .collect())
}
