//! Full-batch gradient descent on a linear model `w Φ`, for mean squared error
//! and for softmax cross-entropy (exact and high-temperature linearized), with
//! closed-form trajectories.
//!
//! Shapes: `w` is `C×F`, `Φ` is `F×N`, targets are `C×N`.
//!
//! Linearizing the softmax about zero inverse temperature gives
//!
//! ```text
//! w ← w − (γ/N) [M w Φ − (C P_L − 1)] Φᵀ,      M = I_C − 1/C
//! ```
//!
//! so `M w` follows the MSE recursion with targets `C P_L − 1` while the
//! class mean of `w` never moves. MSE instead lets the class mean decay as
//! `μ ← μ (I − γ ΦΦᵀ/N)`. Both share the closed form
//!
//! ```text
//! w(t) = w∞ + (w0 − w∞) U (I − γΛ)^t Uᵀ,       ΦΦᵀ/N = U Λ Uᵀ
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io::{read_matrix, write_matrix, MatrixFormat};
use crate::spectra::{decompose, SpectralDecomp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    XentLinearized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    RealValued,
    OneHot,
}

/// `C×N` training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    values: Array2<f64>,
    kind: LabelKind,
}

impl LabelMatrix {
    pub fn real(values: Array2<f64>) -> Self {
        LabelMatrix {
            values,
            kind: LabelKind::RealValued,
        }
    }

    /// One-hot matrix from class indices; `classes` is `C`.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::domain("need at least one class"));
        }
        let mut values = Array2::zeros((classes, labels.len()));
        for (j, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::domain(format!(
                    "label {c} at sample {j} is out of range for {classes} classes"
                )));
            }
            values[[c, j]] = 1.0;
        }
        Ok(LabelMatrix {
            values,
            kind: LabelKind::OneHot,
        })
    }

    /// Validates that every column holds exactly one 1 and `C − 1` zeros.
    pub fn from_one_hot(values: Array2<f64>) -> Result<Self> {
        for (j, col) in values.axis_iter(Axis(1)).enumerate() {
            let ones = col.iter().filter(|&&v| v == 1.0).count();
            let zeros = col.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros + 1 != col.len() {
                return Err(Error::domain(format!("column {j} is not one-hot")));
            }
        }
        Ok(LabelMatrix {
            values,
            kind: LabelKind::OneHot,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }

    /// Argmax class of every column.
    pub fn class_indices(&self) -> Vec<usize> {
        argmax_columns(&self.values)
    }

    /// `C P_L − 1`, the effective regression target of linearized
    /// cross-entropy. Zero mean across classes in every column.
    pub fn xent_target(&self) -> Result<Array2<f64>> {
        if self.kind != LabelKind::OneHot {
            return Err(Error::domain("cross-entropy targets need one-hot labels"));
        }
        let c = self.classes() as f64;
        Ok(self.values.mapv(|v| c * v - 1.0))
    }

    /// Targets seen by `kind`: the labels themselves for MSE, `C P_L − 1`
    /// for linearized cross-entropy.
    pub fn target_for(&self, kind: LossKind) -> Result<Array2<f64>> {
        match kind {
            LossKind::Mse => Ok(self.values.clone()),
            LossKind::XentLinearized => self.xent_target(),
        }
    }
}

/// The class-mean-removing projector `M = I_C − 𝟙/C`, applied without
/// materializing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MMatrix {
    pub classes: usize,
}

impl MMatrix {
    pub fn new(classes: usize) -> Self {
        MMatrix { classes }
    }

    /// `M a` for any `C×k` matrix `a`.
    pub fn apply(&self, a: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(a.nrows(), self.classes);
        a - &class_mean(a)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let c = self.classes;
        Array2::eye(c) - Array2::from_elem((c, c), 1.0 / c as f64)
    }
}

/// Mean across classes (rows), broadcast back to the full shape.
pub fn class_mean(a: &Array2<f64>) -> Array2<f64> {
    let mean = a.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()));
    mean.insert_axis(Axis(0))
        .broadcast(a.dim())
        .expect("row broadcast")
        .to_owned()
}

fn check_step_dims(w: &Array2<f64>, phi: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
    if w.ncols() != phi.nrows() {
        return Err(Error::domain(format!(
            "weights have {} columns but data has {} features",
            w.ncols(),
            phi.nrows()
        )));
    }
    if targets.dim() != (w.nrows(), phi.ncols()) {
        return Err(Error::domain(format!(
            "targets are {:?}, expected {:?}",
            targets.dim(),
            (w.nrows(), phi.ncols())
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "learning rate must be finite and non-negative, got {gamma}"
        )))
    }
}

fn require_one_hot(labels: &LabelMatrix) -> Result<()> {
    if labels.kind() == LabelKind::OneHot {
        Ok(())
    } else {
        Err(Error::domain("labels must be one-hot"))
    }
}

/// One MSE step: `w − (γ/N) w ΦΦᵀ + (γ/N) y Φᵀ`.
pub fn gd_step_mse(w: &Array2<f64>, phi: &Array2<f64>, y: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    check_step_dims(w, phi, y)?;
    check_gamma(gamma)?;
    let residual = w.dot(phi) - y;
    let scale = gamma / phi.ncols() as f64;
    Ok(w - &(residual.dot(&phi.t()) * scale))
}

/// One step of the linearized cross-entropy recursion (the `β²/C` factor and
/// `β = α` are absorbed into `gamma`).
pub fn gd_step_xent_linearized(
    w: &Array2<f64>,
    phi: &Array2<f64>,
    labels: &LabelMatrix,
    gamma: f64,
) -> Result<Array2<f64>> {
    require_one_hot(labels)?;
    check_step_dims(w, phi, labels.values())?;
    check_gamma(gamma)?;
    let m = MMatrix::new(w.nrows());
    let residual = m.apply(w).dot(phi) - labels.xent_target()?;
    let scale = gamma / phi.ncols() as f64;
    Ok(w - &(residual.dot(&phi.t()) * scale))
}

/// Column-wise softmax of `beta * logits`, max-shifted.
pub fn softmax_columns(logits: &Array2<f64>, beta: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| beta * v);
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let total = col.sum();
        col /= total;
    }
    out
}

/// One exact softmax cross-entropy step with inverse temperature `beta` and
/// label smoothing `alpha`: `w − (γβ/N)(P_M − P̃_L)Φᵀ` with
/// `P̃_L = α P_L + (1 − α)/C`.
pub fn gd_step_xent_exact(
    w: &Array2<f64>,
    phi: &Array2<f64>,
    labels: &LabelMatrix,
    gamma: f64,
    beta: f64,
    alpha: f64,
) -> Result<Array2<f64>> {
    require_one_hot(labels)?;
    check_step_dims(w, phi, labels.values())?;
    check_gamma(gamma)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!(
            "label smoothing alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::domain(format!(
            "inverse temperature must be positive, got {beta}"
        )));
    }
    let c = w.nrows() as f64;
    let model = softmax_columns(&w.dot(phi), beta);
    let smoothed = labels.values().mapv(|p| alpha * p + (1.0 - alpha) / c);
    let scale = gamma * beta / phi.ncols() as f64;
    Ok(w - &((model - smoothed).dot(&phi.t()) * scale))
}

/// Largest stable learning rate for a spectrum, `2/λ_max` (infinite for a
/// zero spectrum).
pub fn max_stable_learning_rate(max_eigenvalue: f64) -> f64 {
    if max_eigenvalue > 0.0 {
        2.0 / max_eigenvalue
    } else {
        f64::INFINITY
    }
}

/// `γ = 1/λ_max`, the default: every mode factor `1 − γλ_i` lies in `[0, 1)`.
pub fn default_learning_rate(max_eigenvalue: f64) -> f64 {
    if max_eigenvalue > 0.0 {
        1.0 / max_eigenvalue
    } else {
        1.0
    }
}

/// Everything needed to evaluate the weights after any number of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySolution {
    pub w_infinity: Array2<f64>,
    pub w_initial: Array2<f64>,
    pub decomp: SpectralDecomp,
    pub learning_rate: f64,
    pub loss_kind: LossKind,
}

/// Infinite-time weights `target Φᵀ(ΦΦᵀ)⁺ + w0 (I − U Uᵀ)`; for linearized
/// cross-entropy only `M w∞` is determined and the class mean is pinned to
/// that of `w0`.
fn infinite_time_weights(
    decomp: &SpectralDecomp,
    target: &Array2<f64>,
    w0: &Array2<f64>,
    kind: LossKind,
) -> Result<Array2<f64>> {
    let fit = decomp.pseudo_solve(target)?;
    let frozen = w0 - &w0.dot(&decomp.left_vectors).dot(&decomp.left_vectors.t());
    let w = fit + frozen;
    Ok(match kind {
        LossKind::Mse => w,
        LossKind::XentLinearized => MMatrix::new(w.nrows()).apply(&w) + class_mean(w0),
    })
}

fn check_initial(w0: &Array2<f64>, classes: usize, features: usize) -> Result<()> {
    if w0.dim() != (classes, features) {
        return Err(Error::domain(format!(
            "initial weights are {:?}, expected {:?}",
            w0.dim(),
            (classes, features)
        )));
    }
    Ok(())
}

pub fn solve_trajectory(
    phi: &Array2<f64>,
    labels: &LabelMatrix,
    w0: &Array2<f64>,
    gamma: f64,
    loss_kind: LossKind,
) -> Result<TrajectorySolution> {
    if labels.samples() != phi.ncols() {
        return Err(Error::domain(format!(
            "labels have {} samples but data has {}",
            labels.samples(),
            phi.ncols()
        )));
    }
    check_initial(w0, labels.classes(), phi.nrows())?;
    check_gamma(gamma)?;
    let decomp = decompose(phi)?;
    let gamma_max = max_stable_learning_rate(decomp.max_eigenvalue());
    if gamma >= gamma_max {
        return Err(Error::Unstable { gamma, gamma_max });
    }
    let target = labels.target_for(loss_kind)?;
    let w_infinity = infinite_time_weights(&decomp, &target, w0, loss_kind)?;
    Ok(TrajectorySolution {
        w_infinity,
        w_initial: w0.clone(),
        decomp,
        learning_rate: gamma,
        loss_kind,
    })
}

/// `(1 − γλ)^t`, accurate for tiny `γλ` and huge `t`.
pub fn mode_decay(gamma_lambda: f64, t: u64) -> f64 {
    let base = 1.0 - gamma_lambda;
    if t == 0 {
        1.0
    } else if base > 0.0 {
        ((t as f64) * (-gamma_lambda).ln_1p()).exp()
    } else if t <= i32::MAX as u64 {
        base.powi(t as i32)
    } else {
        let magnitude = ((t as f64) * base.abs().ln()).exp();
        if t.is_multiple_of(2) {
            magnitude
        } else {
            -magnitude
        }
    }
}

/// `(a^t, 1 − a^t)` for `a = 1 − gamma_lambda`, both to full relative
/// precision.
pub fn decay_pair(gamma_lambda: f64, t: u64) -> (f64, f64) {
    if t == 0 {
        return (1.0, 0.0);
    }
    if gamma_lambda < 1.0 {
        let log = t as f64 * (-gamma_lambda).ln_1p();
        (log.exp(), -log.exp_m1())
    } else {
        let a = mode_decay(gamma_lambda, t);
        (a, 1.0 - a)
    }
}

impl TrajectorySolution {
    pub fn classes(&self) -> usize {
        self.w_initial.nrows()
    }

    pub fn features(&self) -> usize {
        self.w_initial.ncols()
    }

    pub fn mode_factors(&self, t: u64) -> Array1<f64> {
        self.decomp.eigenvalues.mapv(|l| mode_decay(self.learning_rate * l, t))
    }

    /// Weights after exactly `t` full-batch steps.
    pub fn evaluate_at(&self, t: u64) -> Array2<f64> {
        // w0 − w∞ has zero class mean for XENT, so M is not needed here.
        let u = &self.decomp.left_vectors;
        let mut coeffs = (&self.w_initial - &self.w_infinity).dot(u);
        let factors = self.mode_factors(t);
        for (mut col, &f) in coeffs.axis_iter_mut(Axis(1)).zip(factors.iter()) {
            col *= f;
        }
        &self.w_infinity + &coeffs.dot(&u.t())
    }

    /// `‖w(t) − target‖²_F` for every `t`, in `O(C·r)` per time after one
    /// projection onto the eigenbasis.
    pub fn squared_distance_curve(&self, target: &Array2<f64>, times: &[u64]) -> Result<Vec<f64>> {
        if target.dim() != self.w_initial.dim() {
            return Err(Error::domain(format!(
                "target is {:?}, weights are {:?}",
                target.dim(),
                self.w_initial.dim()
            )));
        }
        let u = &self.decomp.left_vectors;
        let offset = &self.w_infinity - target;
        let offset_norm2: f64 = offset.iter().map(|v| v * v).sum();
        let offset_modes = offset.dot(u);
        let delta_modes = (&self.w_initial - &self.w_infinity).dot(u);
        Ok(times
            .iter()
            .map(|&t| {
                let factors = self.mode_factors(t);
                let mut cross = 0.0;
                let mut quad = 0.0;
                Zip::from(offset_modes.rows()).and(delta_modes.rows()).for_each(|a, d| {
                    for ((&a, &d), &f) in a.iter().zip(d.iter()).zip(factors.iter()) {
                        cross += a * d * f;
                        quad += (d * f) * (d * f);
                    }
                });
                (offset_norm2 + 2.0 * cross + quad).max(0.0)
            })
            .collect())
    }

    /// Writes `w_infinity`, `w_initial`, `eigenvalues` (1×r), `left_vectors`
    /// and `right_vectors` as binary matrices plus `trajectory.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let eig = self.decomp.eigenvalues.clone().insert_axis(Axis(0));
        for (name, m) in [
            ("w_infinity", &self.w_infinity),
            ("w_initial", &self.w_initial),
            ("eigenvalues", &eig),
            ("left_vectors", &self.decomp.left_vectors),
            ("right_vectors", &self.decomp.right_vectors),
        ] {
            write_matrix(dir.join(format!("{name}.bin")), m, MatrixFormat::Binary)?;
        }
        let header = TrajectoryHeader {
            learning_rate: self.learning_rate,
            loss_kind: self.loss_kind,
            classes: self.classes(),
            features: self.features(),
            samples: self.decomp.samples(),
            rank: self.decomp.rank(),
        };
        let path = dir.join("trajectory.json");
        fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("trajectory.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: TrajectoryHeader = serde_json::from_str(&text)?;
        let read = |name: &str| read_matrix(dir.join(format!("{name}.bin")));
        let eig = read("eigenvalues")?;
        let decomp = SpectralDecomp {
            left_vectors: read("left_vectors")?,
            eigenvalues: eig.row(0).to_owned(),
            right_vectors: read("right_vectors")?,
            dims: (header.features, header.samples),
        };
        let solution = TrajectorySolution {
            w_infinity: read("w_infinity")?,
            w_initial: read("w_initial")?,
            decomp,
            learning_rate: header.learning_rate,
            loss_kind: header.loss_kind,
        };
        if solution.w_infinity.dim() != (header.classes, header.features) || solution.decomp.rank() != header.rank {
            return Err(Error::Format {
                path,
                line: 0,
                message: "matrix shapes disagree with the header".into(),
            });
        }
        Ok(solution)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryHeader {
    learning_rate: f64,
    loss_kind: LossKind,
    classes: usize,
    features: usize,
    samples: usize,
    rank: usize,
}

/// Infinite-time linearized cross-entropy weights: pseudoinverse fit of
/// `C P_L − 1`, plus the frozen-subspace part of `w0`, with the class mean of
/// `w0`. No learning rate is involved.
pub fn converged_xent_weights(phi: &Array2<f64>, labels: &LabelMatrix, w0: &Array2<f64>) -> Result<Array2<f64>> {
    require_one_hot(labels)?;
    if labels.samples() != phi.ncols() {
        return Err(Error::domain(format!(
            "labels have {} samples but features have {}",
            labels.samples(),
            phi.ncols()
        )));
    }
    check_initial(w0, labels.classes(), phi.nrows())?;
    let decomp = decompose(phi)?;
    infinite_time_weights(&decomp, &labels.xent_target()?, w0, LossKind::XentLinearized)
}

/// Argmax over rows of every column, first index on ties.
pub fn argmax_columns(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(1))
        .map(|col| {
            col.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// Predicted class for every column of `Φ`.
pub fn predict_classes(w: &Array2<f64>, phi: &Array2<f64>) -> Vec<usize> {
    argmax_columns(&w.dot(phi))
}

pub fn top1_accuracy(w: &Array2<f64>, phi: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict_classes(w, phi)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}
