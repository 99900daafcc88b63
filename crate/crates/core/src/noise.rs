//! Label-noise models.
//!
//! Eigen-thresholded noise lives in the right-singular basis of the training
//! data: `ε = z Vᵀ` with `z_ij ~ N(0, σ)` when `λ_j > τ` and `z_ij = 0`
//! otherwise. `σ` is the variance of the `z` entries. Uniform noise has
//! i.i.d. `N(0, σ)` entries in sample space and therefore couples to every
//! mode equally.
//!
//! Label permutation on a fraction of the samples is described by a diagonal
//! 0/1 mask `F`; with `X = U Σ Vᵀ` (full SVD),
//!
//! ```text
//! F Xᵀ = V F Σᵀ Uᵀ + [F, V] Σᵀ Uᵀ,      [F, V] = F V − V F = V ⊙ D,  D_ij = F_ii − F_jj
//! ```

use faer::Mat;
use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::spectra::{descending_order, gaussian_matrix, SpectralDecomp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    EigenThresholded,
    Uniform,
    None,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 3] = [NoiseFamily::EigenThresholded, NoiseFamily::Uniform, NoiseFamily::None];

    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::EigenThresholded => "eigen_thresholded",
            NoiseFamily::Uniform => "uniform",
            NoiseFamily::None => "none",
        }
    }
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown noise family {s:?}")))
    }
}

pub const DEFAULT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    /// Variance of the noise entries.
    pub sigma: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub seed: u64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            family,
            sigma,
            threshold: DEFAULT_THRESHOLD,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::domain(format!(
                "noise variance must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::domain(format!(
                "noise threshold must be finite, got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// The `C×N` noise realization for training data with decomposition
    /// `decomp`.
    pub fn realize(&self, decomp: &SpectralDecomp, classes: usize) -> Result<Array2<f64>> {
        self.validate()?;
        match self.family {
            NoiseFamily::EigenThresholded => make_thresholded_noise(decomp, self, classes),
            NoiseFamily::Uniform => make_uniform_noise(decomp.samples(), classes, self.sigma, self.seed),
            NoiseFamily::None => Ok(Array2::zeros((classes, decomp.samples()))),
        }
    }
}

/// Which modes receive noise: strictly above `threshold`.
pub fn noisy_modes(eigenvalues: &Array1<f64>, threshold: f64) -> Vec<bool> {
    eigenvalues.iter().map(|&l| l > threshold).collect()
}

/// `ε = z Vᵀ` with `z` masked to modes whose eigenvalue exceeds the
/// threshold. The full `C×r` block is always drawn, so the realization of a
/// mode does not depend on which other modes are masked.
pub fn make_thresholded_noise(decomp: &SpectralDecomp, spec: &NoiseSpec, classes: usize) -> Result<Array2<f64>> {
    if spec.family != NoiseFamily::EigenThresholded {
        return Err(Error::domain(format!(
            "thresholded noise requested with family {}",
            spec.family.name()
        )));
    }
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let mut z = gaussian_matrix(classes, decomp.rank(), spec.sigma.sqrt(), &mut rng);
    for (mut col, keep) in z
        .axis_iter_mut(Axis(1))
        .zip(noisy_modes(&decomp.eigenvalues, spec.threshold))
    {
        if !keep {
            col.fill(0.0);
        }
    }
    Ok(z.dot(&decomp.right_vectors.t()))
}

/// `C×N` matrix of i.i.d. `N(0, σ)` entries.
pub fn make_uniform_noise(n: usize, classes: usize, sigma: f64, seed: u64) -> Result<Array2<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::domain(format!(
            "noise variance must be finite and non-negative, got {sigma}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    Ok(gaussian_matrix(classes, n, sigma.sqrt(), &mut rng))
}

/// `η = ε V`: noise coordinates in the right-singular basis.
pub fn noise_mode_coefficients(epsilon: &Array2<f64>, decomp: &SpectralDecomp) -> Result<Array2<f64>> {
    if epsilon.ncols() != decomp.samples() {
        return Err(Error::domain(format!(
            "noise has {} columns but the data has {} samples",
            epsilon.ncols(),
            decomp.samples()
        )));
    }
    Ok(epsilon.dot(&decomp.right_vectors))
}

/// Diagonal 0/1 matrix stored as the sorted set of its ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationMask {
    pub indices: Vec<usize>,
    pub n: usize,
}

impl PermutationMask {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.last().is_some_and(|&i| i >= n) {
            return Err(Error::domain(format!("mask index out of range for N={n}")));
        }
        Ok(PermutationMask { indices, n })
    }

    /// `round(fraction · N)` distinct indices chosen uniformly.
    pub fn random(n: usize, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::domain(format!(
                "mask fraction must lie in [0, 1], got {fraction}"
            )));
        }
        let count = ((fraction * n as f64).round() as usize).min(n);
        let mut rng = rng_from_seed(seed);
        PermutationMask::new(sample(&mut rng, n, count).into_vec(), n)
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.count() as f64 / self.n as f64
        }
    }

    pub fn diagonal(&self) -> Array1<f64> {
        let mut d = Array1::zeros(self.n);
        for &i in &self.indices {
            d[i] = 1.0;
        }
        d
    }

    pub fn to_dense(&self) -> Array2<f64> {
        Array2::from_diag(&self.diagonal())
    }
}

/// Both terms of `F Xᵀ` and the commutator bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationDecomposition {
    /// `V F Σᵀ Uᵀ`, `N×D`.
    pub coupled: Array2<f64>,
    /// `[F, V] Σᵀ Uᵀ`, `N×D`.
    pub commutator_term: Array2<f64>,
    /// `D_ij = F_ii − F_jj`, `N×N`.
    pub d_matrix: Array2<f64>,
    /// `F V − V F`, `N×N`, from dense products.
    pub commutator: Array2<f64>,
    /// `max |[F, V] − V ⊙ D|`.
    pub commutator_identity_error: f64,
}

impl PermutationDecomposition {
    pub fn reconstruction(&self) -> Array2<f64> {
        &self.coupled + &self.commutator_term
    }
}

/// Splits `F Xᵀ` for a `D×N` data matrix using a full SVD `X = U Σ Vᵀ`.
pub fn permutation_noise_decomposition(x: &Array2<f64>, mask: &PermutationMask) -> Result<PermutationDecomposition> {
    let (d, n) = x.dim();
    if mask.n != n {
        return Err(Error::domain(format!(
            "mask is for N={} but the data has {n} samples",
            mask.n
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("matrix has non-finite entry {bad}")));
    }
    let svd = Mat::from_fn(d, n, |i, j| x[[i, j]]).svd();
    let s = svd.s_diagonal();
    let k = s.nrows();
    let values: Vec<f64> = (0..k).map(|i| s.read(i)).collect();
    let order = descending_order(&values);
    let (u, v_f) = (svd.u(), svd.v());
    // V with its first k columns reordered by descending singular value
    let v = Array2::from_shape_fn((n, n), |(i, j)| {
        let col = if j < k { order[j] } else { j };
        v_f.read(i, col)
    });
    let sigma_t_ut = Array2::from_shape_fn((n, d), |(i, j)| {
        if i < k {
            values[order[i]] * u.read(j, order[i])
        } else {
            0.0
        }
    });

    let f = mask.to_dense();
    let fd = mask.diagonal();
    let commutator = f.dot(&v) - v.dot(&f);
    let d_matrix = Array2::from_shape_fn((n, n), |(i, j)| fd[i] - fd[j]);
    let hadamard = &v * &d_matrix;
    let commutator_identity_error = (&commutator - &hadamard).iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok(PermutationDecomposition {
        coupled: v.dot(&f).dot(&sigma_t_ut),
        commutator_term: commutator.dot(&sigma_t_ut),
        d_matrix,
        commutator,
        commutator_identity_error,
    })
}
