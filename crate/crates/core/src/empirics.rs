//! Finite-size Monte Carlo for the teacher–student model, and the two
//! interventions that remove epochwise double descent.
//!
//! Each realization draws `X` (`D×N`, standard normal), a teacher `w_T`
//! (`C×D`, entries of variance `1/D`) and label noise `ε`, fits `y = w_T X + ε`
//! by gradient descent from `w0 = 0`, and reports the test loss on isotropic
//! test inputs, `½‖w(t) − w_T‖²_F / C`. That is exactly the expectation over
//! `x_T ~ N(0, I)` so no test set is sampled.
//!
//! `sigma` in an [`ExperimentConfig`] is the noise level of the theory, i.e.
//! the variance of each noisy mode's contribution `σ/x` per unit of spectral
//! mass. The sample-space noise entries that reproduce it have variance
//! `σ N / D` (see [`label_noise_variance`]).
//!
//! Two samplers are available. [`Sampler::DataMatrix`] materializes `X` and
//! decomposes it. [`Sampler::Spectral`] draws the same joint law directly in
//! the eigenbasis: the nonzero eigenvalues of `XXᵀ/N` from the bidiagonal chi
//! model, and teacher and noise coordinates as independent Gaussians (both
//! are rotation invariant). It costs `O(min(D,N)²)` per realization.
//!
//! Realization `s` uses the streams `derive_seed(s, DATA | TEACHER | NOISE)`,
//! so switching the noise family never changes the data or the teacher.

use std::collections::HashSet;
use std::fmt::Write as _;

use faer::Side;
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, LabelMatrix, LossKind};
use crate::error::{Error, Result};
use crate::noise::{make_uniform_noise, NoiseFamily, NoiseSpec};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::spectra::{decompose, descending_order, gaussian_matrix, mp_params, sample_wishart_eigenvalues, to_faer};
use crate::theory::{self, classify_phase, CurveParams, LossCurve, PhaseCell, Tolerances};

pub const DEFAULT_N: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    DataMatrix,
    Spectral,
}

/// Preprocessing of the training inputs. Labels are always generated from
/// the unfiltered inputs and the test loss is always against the unfiltered
/// teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum FeatureFilter {
    None,
    /// Keep the top `k` principal components.
    PcaTopK(usize),
    /// Keep the principal components whose covariance eigenvalue exceeds the
    /// given threshold.
    PcaAboveThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// `noise.sigma` is in theory units; `noise.seed` is unused because each
    /// realization derives its own noise stream.
    pub noise: NoiseSpec,
    pub gamma: f64,
    pub time_grid: Vec<u64>,
    pub seeds: Vec<u64>,
    pub sampler: Sampler,
    pub filter: FeatureFilter,
}

impl ExperimentConfig {
    /// `D = round(λN)`, one class, `γ = 1/λ₊(λ)`, the default time grid and
    /// the spectral sampler.
    pub fn new(n: usize, lambda: f64, noise: NoiseSpec, seeds: Vec<u64>) -> Result<Self> {
        let d = (lambda * n as f64).round() as usize;
        Ok(ExperimentConfig {
            n,
            d,
            classes: 1,
            noise,
            gamma: theory::default_learning_rate(lambda)?,
            time_grid: theory::time_grid(theory::DEFAULT_T_MAX, theory::DEFAULT_POINTS)?,
            seeds,
            sampler: Sampler::Spectral,
            filter: FeatureFilter::None,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.d as f64 / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.classes == 0 {
            return Err(Error::domain(format!(
                "dimensions must be positive, got N={}, D={}, C={}",
                self.n, self.d, self.classes
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::domain("at least one seed is required"));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::domain("seeds must be distinct"));
        }
        if self.time_grid.is_empty() || !self.time_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::domain("time grid must be nonempty and strictly increasing"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::domain(format!(
                "learning rate must be positive, got {}",
                self.gamma
            )));
        }
        self.noise.validate()?;
        if self.sampler == Sampler::Spectral && self.filter != FeatureFilter::None {
            return Err(Error::domain("feature filters need the data-matrix sampler"));
        }
        if let FeatureFilter::PcaTopK(k) = self.filter {
            if k > self.d {
                return Err(Error::domain(format!(
                    "cannot keep {k} components of {} features",
                    self.d
                )));
            }
        }
        Ok(())
    }
}

/// Variance of sample-space noise entries that realizes theory noise `σ`.
pub fn label_noise_variance(sigma: f64, n: usize, d: usize) -> f64 {
    sigma * n as f64 / d as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub times: Vec<u64>,
    pub seeds: Vec<u64>,
    pub mean: Vec<f64>,
    /// Sample standard deviation across seeds (zero for one seed).
    pub std: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `per_seed[s][i]` is seed `s` at time `i`.
    pub per_seed: Vec<Vec<f64>>,
}

impl CurveStats {
    /// Aggregates in seed order.
    pub fn from_runs(times: Vec<u64>, seeds: Vec<u64>, per_seed: Vec<Vec<f64>>) -> Self {
        let s = per_seed.len() as f64;
        let mut mean = vec![0.0; times.len()];
        let mut std = vec![0.0; times.len()];
        for i in 0..times.len() {
            let m = per_seed.iter().map(|r| r[i]).sum::<f64>() / s;
            let ss = per_seed.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>();
            mean[i] = m;
            std[i] = if per_seed.len() > 1 {
                (ss / (s - 1.0)).sqrt()
            } else {
                0.0
            };
        }
        let stderr = std.iter().map(|v| v / s.sqrt()).collect();
        CurveStats {
            times,
            seeds,
            mean,
            std,
            stderr,
            per_seed,
        }
    }

    /// `t,mean,std,stderr` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean,std,stderr\n");
        for i in 0..self.times.len() {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?}",
                self.times[i], self.mean[i], self.std[i], self.stderr[i]
            );
        }
        out
    }

    /// `t,seed_<s>,...` CSV, one column per seed.
    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("t");
        for s in &self.seeds {
            let _ = write!(out, ",seed_{s}");
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t}");
            for run in &self.per_seed {
                let _ = write!(out, ",{:?}", run[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn mean_curve(&self, params: CurveParams) -> Result<LossCurve> {
        LossCurve::from_values(self.times.clone(), self.mean.clone(), params)
    }
}

fn noise_variance(config: &ExperimentConfig) -> f64 {
    label_noise_variance(config.noise.sigma, config.n, config.d)
}

fn check_stability(gamma: f64, max_eigenvalue: f64) -> Result<()> {
    let gamma_max = dynamics::max_stable_learning_rate(max_eigenvalue);
    if gamma >= gamma_max {
        Err(Error::Unstable { gamma, gamma_max })
    } else {
        Ok(())
    }
}

fn spectral_run(config: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let (n, d, c) = (config.n, config.d, config.classes);
    let eig = sample_wishart_eigenvalues(d, n, &mut rng_from_seed(derive_seed(seed, stream::DATA)))?;
    let max = eig.iter().copied().fold(0.0, f64::max);
    check_stability(config.gamma, max)?;
    let r = eig.len();
    let teacher_std = 1.0 / (d as f64).sqrt();
    let mut teacher_rng = rng_from_seed(derive_seed(seed, stream::TEACHER));
    let q = gaussian_matrix(c, r, teacher_std, &mut teacher_rng);
    let null = gaussian_matrix(c, d - r, teacher_std, &mut teacher_rng);
    let frozen: f64 = null.iter().map(|v| v * v).sum();

    let noise_std = noise_variance(config).sqrt();
    let mut eta = gaussian_matrix(c, r, noise_std, &mut rng_from_seed(derive_seed(seed, stream::NOISE)));
    for (mut col, &l) in eta.axis_iter_mut(Axis(1)).zip(&eig) {
        let keep = match config.noise.family {
            NoiseFamily::EigenThresholded => l > config.noise.threshold,
            NoiseFamily::Uniform => true,
            NoiseFamily::None => false,
        };
        if !keep {
            col.fill(0.0);
        }
    }
    // per mode: w(t) − q = (η/√(N l)) (1 − a^t) − q a^t
    let scale: Vec<f64> = eig.iter().map(|&l| 1.0 / (n as f64 * l).sqrt()).collect();
    let norm = 0.5 / c as f64;
    Ok(config
        .time_grid
        .iter()
        .map(|&t| {
            let mut total = frozen;
            for (j, &l) in eig.iter().enumerate() {
                let (remaining, learned) = dynamics::decay_pair(config.gamma * l, t);
                for i in 0..c {
                    let residual = eta[[i, j]] * scale[j] * learned - q[[i, j]] * remaining;
                    total += residual * residual;
                }
            }
            norm * total
        })
        .collect())
}

fn data_matrix_run(config: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let (n, d, c) = (config.n, config.d, config.classes);
    let x = gaussian_matrix(d, n, 1.0, &mut rng_from_seed(derive_seed(seed, stream::DATA)));
    let teacher = gaussian_matrix(
        c,
        d,
        1.0 / (d as f64).sqrt(),
        &mut rng_from_seed(derive_seed(seed, stream::TEACHER)),
    );
    let noise_seed = derive_seed(seed, stream::NOISE);
    let variance = noise_variance(config);
    let epsilon = match config.noise.family {
        NoiseFamily::EigenThresholded => {
            let spec = NoiseSpec {
                sigma: variance,
                seed: noise_seed,
                ..config.noise
            };
            spec.realize(&decompose(&x)?, c)?
        }
        NoiseFamily::Uniform => make_uniform_noise(n, c, variance, noise_seed)?,
        NoiseFamily::None => Array2::zeros((c, n)),
    };
    let labels = LabelMatrix::real(teacher.dot(&x) + &epsilon);
    let features = match config.filter {
        FeatureFilter::None => x,
        FeatureFilter::PcaTopK(k) => pca_filter(&x, k)?.filtered,
        FeatureFilter::PcaAboveThreshold(tau) => pca_filter_above(&x, tau)?.filtered,
    };
    let decomp_max = decompose(&features)?.max_eigenvalue();
    check_stability(config.gamma, decomp_max)?;
    let traj = dynamics::solve_trajectory(&features, &labels, &Array2::zeros((c, d)), config.gamma, LossKind::Mse)?;
    let norm = 0.5 / c as f64;
    Ok(traj
        .squared_distance_curve(&teacher, &config.time_grid)?
        .into_iter()
        .map(|v| norm * v)
        .collect())
}

/// Test-loss curve of a single realization.
pub fn run_single_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let run = match config.sampler {
        Sampler::Spectral => spectral_run(config, seed),
        Sampler::DataMatrix => data_matrix_run(config, seed),
    };
    run.map_err(|e| Error::Seed {
        seed,
        source: Box::new(e),
    })
}

/// All seeds in parallel, aggregated in seed order.
pub fn run_teacher_student(config: &ExperimentConfig) -> Result<CurveStats> {
    config.validate()?;
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&s| run_single_seed(config, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveStats::from_runs(
        config.time_grid.clone(),
        config.seeds.clone(),
        per_seed,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: u64,
    pub mean: f64,
    pub stderr: f64,
    pub theory: f64,
    /// `(mean − theory)` over the standard error combined with the theory's
    /// absolute error bound.
    pub z: f64,
}

/// Monte Carlo mean against the expected test loss on the same grid.
pub fn compare_with_theory(stats: &CurveStats, config: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    let theory = theory::loss_curve_on_grid(
        config.lambda(),
        config.noise.sigma,
        config.gamma,
        config.noise.threshold,
        &stats.times,
    )?;
    Ok(stats
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let diff = stats.mean[i] - theory.losses[i];
            let z = diff / stats.stderr[i].hypot(theory::ABSOLUTE_ERROR_BOUND);
            ComparisonRow {
                t,
                mean: stats.mean[i],
                stderr: stats.stderr[i],
                theory: theory.losses[i],
                z,
            }
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("t,mean,stderr,theory,z\n");
    for r in rows {
        let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", r.t, r.mean, r.stderr, r.theory, r.z);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `D×N`, projection onto the kept components plus the mean.
    pub filtered: Array2<f64>,
    /// `D×k`, orthonormal, by descending variance.
    pub components: Array2<f64>,
    pub explained_variance_ratio: f64,
    /// Feature-wise mean, length `D`.
    pub mean: Array1<f64>,
    /// All `D` eigenvalues of the centered covariance `X_c X_cᵀ / N`,
    /// descending.
    pub eigenvalues: Array1<f64>,
}

/// Eigenpairs of the centered covariance, descending.
fn covariance_eigen(x: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let (d, n) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::domain("PCA needs a nonempty matrix"));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("matrix has non-finite entry {bad}")));
    }
    let mean = x.mean_axis(Axis(1)).expect("nonempty");
    let centered = x - &mean.clone().insert_axis(Axis(1));
    let cov = centered.dot(&centered.t()) / n as f64;
    let eig = to_faer(&cov).selfadjoint_eigendecomposition(Side::Lower);
    let s = eig.s();
    let values: Vec<f64> = (0..d).map(|i| s.column_vector().read(i).max(0.0)).collect();
    let order = descending_order(&values);
    let u = eig.u();
    let vectors = Array2::from_shape_fn((d, d), |(i, k)| u.read(i, order[k]));
    let eigenvalues = order.iter().map(|&i| values[i]).collect();
    Ok((eigenvalues, vectors, centered))
}

fn pca_from_parts(
    mean: Array1<f64>,
    eigenvalues: Array1<f64>,
    vectors: &Array2<f64>,
    centered: &Array2<f64>,
    k: usize,
) -> PcaResult {
    let components = vectors.slice(ndarray::s![.., ..k]).to_owned();
    let projected = components.dot(&components.t().dot(centered));
    let filtered = projected + &mean.clone().insert_axis(Axis(1));
    let total: f64 = eigenvalues.sum();
    let kept = eigenvalues.iter().take(k).fold(0.0, |acc, v| acc + v);
    let explained_variance_ratio = if k == eigenvalues.len() {
        1.0
    } else if total > 0.0 {
        (kept / total).min(1.0)
    } else {
        0.0
    };
    PcaResult {
        filtered,
        components,
        explained_variance_ratio,
        mean,
        eigenvalues,
    }
}

/// Keeps the top `k` principal components of the column-centered data and
/// adds the feature-wise mean back.
pub fn pca_filter(x: &Array2<f64>, k: usize) -> Result<PcaResult> {
    if k > x.nrows() {
        return Err(Error::domain(format!(
            "cannot keep {k} components of {} features",
            x.nrows()
        )));
    }
    let (eigenvalues, vectors, centered) = covariance_eigen(x)?;
    let mean = x.mean_axis(Axis(1)).expect("nonempty");
    Ok(pca_from_parts(mean, eigenvalues, &vectors, &centered, k))
}

/// Keeps every principal component whose covariance eigenvalue exceeds
/// `threshold`.
pub fn pca_filter_above(x: &Array2<f64>, threshold: f64) -> Result<PcaResult> {
    let (eigenvalues, vectors, centered) = covariance_eigen(x)?;
    let k = eigenvalues.iter().filter(|&&l| l > threshold).count();
    let mean = x.mean_axis(Axis(1)).expect("nonempty");
    Ok(pca_from_parts(mean, eigenvalues, &vectors, &centered, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergedHead {
    pub weights: Array2<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

/// Replaces a linear head by the infinite-time linearized cross-entropy
/// solution on the given penultimate features.
pub fn converged_last_layer(features: &Array2<f64>, labels: &LabelMatrix, w0: &Array2<f64>) -> Result<ConvergedHead> {
    let weights = dynamics::converged_xent_weights(features, labels, w0)?;
    let classes = labels.class_indices();
    Ok(ConvergedHead {
        accuracy_before: dynamics::top1_accuracy(w0, features, &classes),
        accuracy_after: dynamics::top1_accuracy(&weights, features, &classes),
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub family: NoiseFamily,
    pub cell: PhaseCell,
    pub double_descent: bool,
    pub times: Vec<u64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub tolerances: Tolerances,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn entry(&self, family: NoiseFamily) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.family == family)
    }
}

/// Runs the same configuration under each noise family at matched `σ` and
/// classifies every mean curve.
pub fn edd_ablation_suite(
    config: &ExperimentConfig,
    families: &[NoiseFamily],
    tol: Tolerances,
) -> Result<AblationReport> {
    let entries = families
        .iter()
        .map(|&family| {
            let run = ExperimentConfig {
                noise: NoiseSpec { family, ..config.noise },
                ..config.clone()
            };
            let stats = run_teacher_student(&run)?;
            let curve = stats.mean_curve(CurveParams {
                lambda: run.lambda(),
                sigma: run.noise.sigma,
                gamma: run.gamma,
                threshold: run.noise.threshold,
            })?;
            let cell = classify_phase(&curve, tol)?;
            Ok(AblationEntry {
                family,
                double_descent: cell.phase.has_double_descent(),
                cell,
                times: stats.times,
                mean: stats.mean,
                stderr: stats.stderr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        config: config.clone(),
        tolerances: tol,
        entries,
    })
}

/// Fraction of total variance carried by eigenvalues above `x0` under the MP
/// law, `∫_{x>x0} x p(x) dx` (the mean of the law is 1).
pub fn mp_upper_partial_moment(lambda: f64, x0: f64) -> Result<f64> {
    mp_params(lambda)?;
    let q = theory::MpIntegrator::new(lambda, x0)?;
    Ok(q.integrate(|x, above| if above { x } else { 0.0 }))
}
