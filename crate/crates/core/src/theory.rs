//! Expected test loss over training time for the linear teacher–student model
//! with eigen-thresholded label noise, averaged over the Marchenko–Pastur
//! spectrum of the training data.
//!
//! With `a(x) = 1 − γx`, noise variance `σ` and threshold `τ`,
//!
//! ```text
//! L(t) = ½ [ ∫_{x>τ} (a^{2t} + (σ/x)(1 − a^t)²) p(x) dx
//!          + ∫_{x<τ} a^{2t} p(x) dx
//!          + max(0, 1 − 1/λ) ]
//! ```
//!
//! which equals `(1 + σ/x) a^{2t} + (σ/x)(1 − 2a^t)` on the noisy modes. The
//! last term is the frozen null space of an over-parameterized model.
//!
//! Integrals are taken in `θ`, where `x = λ₋ + 2c sin²(θ/2)`,
//! `c = (λ₊ − λ₋)/2`; the square-root edges of the density cancel against the
//! Jacobian. The `θ` interval is split at `τ` and each piece integrated with a
//! graded composite Gauss–Legendre rule (see [`crate::quadrature`]) whose
//! panels are halved until two successive estimates agree to
//! [`QUADRATURE_TOLERANCE`].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::OnceLock;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::decay_pair;
use crate::error::{Error, Result};
use crate::noise::DEFAULT_THRESHOLD;
use crate::quadrature::{composite_nodes, GaussLegendre};
use crate::spectra::{mp_params, MpParams};

pub const QUADRATURE_TOLERANCE: f64 = 1e-9;
/// Bound on the absolute error of [`expected_test_loss`].
pub const ABSOLUTE_ERROR_BOUND: f64 = 1e-8;
pub const DEFAULT_T_MAX: u64 = 1_000_000;
pub const DEFAULT_POINTS: usize = 200;
const GAUSS_ORDER: usize = 16;
const MAX_LEVEL: usize = 10;

/// `γ = 1/λ₊(λ)`.
pub fn default_learning_rate(lambda: f64) -> Result<f64> {
    Ok(1.0 / mp_params(lambda)?.support_high)
}

/// How the learning rate is chosen for each aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum GammaRule {
    /// `γ = f/λ₊`; `f = 1` is the default.
    EdgeFraction(f64),
    Fixed(f64),
}

impl Default for GammaRule {
    fn default() -> Self {
        GammaRule::EdgeFraction(1.0)
    }
}

impl GammaRule {
    pub fn gamma(&self, lambda: f64) -> Result<f64> {
        match *self {
            GammaRule::EdgeFraction(f) => Ok(f / mp_params(lambda)?.support_high),
            GammaRule::Fixed(g) => Ok(g),
        }
    }
}

#[derive(Debug)]
struct Segment {
    theta_low: f64,
    theta_high: f64,
    noisy: bool,
    levels: [OnceLock<Vec<(f64, f64)>>; MAX_LEVEL + 1],
}

/// Quadrature over the continuous part of the MP law for fixed `(λ, τ)`.
/// Node sets are built lazily per refinement level and shared across threads.
#[derive(Debug)]
pub struct MpIntegrator {
    params: MpParams,
    threshold: f64,
    rule: GaussLegendre,
    segments: Vec<Segment>,
}

impl MpIntegrator {
    pub fn new(lambda: f64, threshold: f64) -> Result<Self> {
        let params = mp_params(lambda)?;
        if !threshold.is_finite() {
            return Err(Error::domain(format!("threshold must be finite, got {threshold}")));
        }
        let (lo, hi) = (params.support_low, params.support_high);
        let c = 0.5 * (hi - lo);
        let theta_tau = if threshold <= lo {
            0.0
        } else if threshold >= hi {
            PI
        } else {
            (1.0 - (threshold - lo) / c).clamp(-1.0, 1.0).acos()
        };
        let segment = |a: f64, b: f64, noisy: bool| Segment {
            theta_low: a,
            theta_high: b,
            noisy,
            levels: Default::default(),
        };
        let mut segments = Vec::new();
        if theta_tau > 0.0 {
            segments.push(segment(0.0, theta_tau, false));
        }
        if theta_tau < PI {
            segments.push(segment(theta_tau, PI, true));
        }
        Ok(MpIntegrator {
            params,
            threshold,
            rule: GaussLegendre::new(GAUSS_ORDER),
            segments,
        })
    }

    pub fn params(&self) -> &MpParams {
        &self.params
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// `(x, weight · p(x) dx/dθ)` for one segment at one level.
    fn nodes<'a>(&'a self, segment: &'a Segment, level: usize) -> &'a [(f64, f64)] {
        segment.levels[level].get_or_init(|| {
            let lo = self.params.support_low;
            let c = 0.5 * (self.params.support_high - lo);
            let lambda = self.params.aspect_ratio;
            let (thetas, weights) = composite_nodes(&self.rule, segment.theta_low, segment.theta_high, level as u32);
            thetas
                .iter()
                .zip(&weights)
                .map(|(&th, &w)| {
                    let (s, co) = (0.5 * th).sin_cos();
                    let x = lo + 2.0 * c * s * s;
                    let sin_theta = 2.0 * s * co;
                    let jac_density = c * c * sin_theta * sin_theta / (2.0 * PI * lambda * x);
                    (x, w * jac_density)
                })
                .collect()
        })
    }

    /// `∫ f(x, noisy) p(x) dx` at one fixed refinement level (each graded
    /// panel split into `2^level` pieces), `level ≤ 10`.
    pub fn integrate_at_level(&self, level: usize, f: impl Fn(f64, bool) -> f64) -> f64 {
        assert!(level <= MAX_LEVEL, "refinement level {level} exceeds {MAX_LEVEL}");
        self.segments
            .iter()
            .map(|seg| {
                self.nodes(seg, level)
                    .iter()
                    .map(|&(x, w)| if w == 0.0 { 0.0 } else { w * f(x, seg.noisy) })
                    .sum::<f64>()
            })
            .sum()
    }

    /// `∫ f(x, noisy) p(x) dx` over the continuous part, refined until two
    /// successive levels agree to [`QUADRATURE_TOLERANCE`]. `noisy` is true
    /// strictly above the threshold.
    pub fn integrate(&self, f: impl Fn(f64, bool) -> f64) -> f64 {
        let mut previous = self.integrate_at_level(0, &f);
        for level in 1..=MAX_LEVEL {
            let current = self.integrate_at_level(level, &f);
            if (current - previous).abs() < QUADRATURE_TOLERANCE {
                return current;
            }
            previous = current;
        }
        previous
    }

    /// Expected test loss after `t` steps at learning rate `gamma`.
    pub fn loss(&self, t: u64, sigma: f64, gamma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        check_gamma(gamma, &self.params)?;
        let continuous = self.integrate(|x, noisy| {
            let (at, one_minus_at) = decay_pair(gamma * x, t);
            let signal = at * at;
            if noisy {
                signal + sigma / x * one_minus_at * one_minus_at
            } else {
                signal
            }
        });
        Ok(0.5 * (continuous + self.params.point_mass_at_zero))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "noise variance must be finite and non-negative, got {sigma}"
        )))
    }
}

fn check_gamma(gamma: f64, params: &MpParams) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::domain(format!("learning rate must be positive, got {gamma}")));
    }
    let gamma_max = 2.0 / params.support_high;
    if gamma >= gamma_max {
        return Err(Error::Unstable { gamma, gamma_max });
    }
    Ok(())
}

/// Expected test loss with the default threshold `τ = 1`.
pub fn expected_test_loss(t: u64, lambda: f64, sigma: f64, gamma: f64) -> Result<f64> {
    expected_test_loss_with_threshold(t, lambda, sigma, gamma, DEFAULT_THRESHOLD)
}

pub fn expected_test_loss_with_threshold(t: u64, lambda: f64, sigma: f64, gamma: f64, threshold: f64) -> Result<f64> {
    MpIntegrator::new(lambda, threshold)?.loss(t, sigma, gamma)
}

/// `0` followed by `points − 1` log-spaced integers from 1 to `t_max`,
/// rounded and deduplicated. Always contains `0` and `t_max`.
pub fn time_grid(t_max: u64, points: usize) -> Result<Vec<u64>> {
    if points < 2 || t_max < 1 {
        return Err(Error::domain(format!(
            "time grid needs t_max >= 1 and points >= 2, got {t_max}, {points}"
        )));
    }
    let mut grid = vec![0u64];
    let steps = points - 1;
    let top = (t_max as f64).ln();
    for i in 0..steps {
        let t = if steps == 1 || i == steps - 1 {
            t_max
        } else {
            (top * i as f64 / (steps - 1) as f64).exp().round() as u64
        };
        grid.push(t.clamp(1, t_max));
    }
    grid.dedup();
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub lambda: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub times: Vec<u64>,
    pub losses: Vec<f64>,
    pub params: CurveParams,
}

impl LossCurve {
    /// Curve with `times`/`losses` taken verbatim, e.g. a Monte Carlo mean.
    pub fn from_values(times: Vec<u64>, losses: Vec<f64>, params: CurveParams) -> Result<Self> {
        if times.len() != losses.len() {
            return Err(Error::domain("times and losses differ in length"));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::domain("times must be strictly increasing"));
        }
        Ok(LossCurve { times, losses, params })
    }

    /// `t,loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,loss\n");
        for (t, l) in self.times.iter().zip(&self.losses) {
            let _ = writeln!(out, "{t},{l:?}");
        }
        out
    }
}

pub fn loss_curve_on_grid(lambda: f64, sigma: f64, gamma: f64, threshold: f64, times: &[u64]) -> Result<LossCurve> {
    let integrator = MpIntegrator::new(lambda, threshold)?;
    let losses = times
        .iter()
        .map(|&t| integrator.loss(t, sigma, gamma))
        .collect::<Result<Vec<_>>>()?;
    LossCurve::from_values(
        times.to_vec(),
        losses,
        CurveParams {
            lambda,
            sigma,
            gamma,
            threshold,
        },
    )
}

pub fn loss_curve(lambda: f64, sigma: f64, gamma: f64, t_max: u64, points: usize) -> Result<LossCurve> {
    loss_curve_on_grid(lambda, sigma, gamma, DEFAULT_THRESHOLD, &time_grid(t_max, points)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "NDD_NES")]
    NddNes,
    #[serde(rename = "NDD_ES")]
    NddEs,
    #[serde(rename = "EDD_NES")]
    EddNes,
    #[serde(rename = "EDD_ES")]
    EddEs,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::NddNes, Phase::NddEs, Phase::EddNes, Phase::EddEs];

    pub fn new(double_descent: bool, early_stopping: bool) -> Self {
        match (double_descent, early_stopping) {
            (false, false) => Phase::NddNes,
            (false, true) => Phase::NddEs,
            (true, false) => Phase::EddNes,
            (true, true) => Phase::EddEs,
        }
    }

    pub fn has_double_descent(self) -> bool {
        matches!(self, Phase::EddNes | Phase::EddEs)
    }

    pub fn favors_early_stopping(self) -> bool {
        matches!(self, Phase::NddEs | Phase::EddEs)
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::NddNes => "NDD_NES",
            Phase::NddEs => "NDD_ES",
            Phase::EddNes => "EDD_NES",
            Phase::EddEs => "EDD_ES",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Thresholds relative to the initial loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rise: f64,
    pub early_stop: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rise: 1e-3,
            early_stop: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub t_early_stop: u64,
    pub loss_early_stop: f64,
    pub loss_final: f64,
    /// `loss_final − loss_early_stop`, never negative.
    pub es_gap: f64,
}

/// Global-minimum statistics; the first minimizer wins ties.
pub fn early_stopping_analysis(curve: &LossCurve) -> Result<EarlyStopping> {
    let (&loss_final, &t_last) = match (curve.losses.last(), curve.times.last()) {
        (Some(l), Some(t)) => (l, t),
        _ => return Err(Error::domain("empty loss curve")),
    };
    let mut best = (t_last, loss_final);
    for (&t, &l) in curve.times.iter().zip(&curve.losses).rev() {
        if l <= best.1 {
            best = (t, l);
        }
    }
    Ok(EarlyStopping {
        t_early_stop: best.0,
        loss_early_stop: best.1,
        loss_final,
        es_gap: loss_final - best.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub lambda: f64,
    pub sigma: f64,
    pub phase: Phase,
    #[serde(rename = "t_es")]
    pub t_early_stop: u64,
    #[serde(rename = "loss_es")]
    pub loss_early_stop: f64,
    pub loss_final: f64,
    pub es_gap: f64,
}

/// Whether indices `i < j < k` exist with `L[j] − L[i] ≥ margin` and
/// `L[k] ≤ L[j] − margin`.
pub fn has_rise_then_fall(losses: &[f64], margin: f64) -> bool {
    let n = losses.len();
    if n < 3 {
        return false;
    }
    let mut suffix_min = vec![f64::INFINITY; n + 1];
    for k in (0..n).rev() {
        suffix_min[k] = suffix_min[k + 1].min(losses[k]);
    }
    let mut prefix_min = losses[0];
    for j in 1..n - 1 {
        let peak = losses[j];
        if peak - prefix_min >= margin && suffix_min[j + 1] <= peak - margin {
            return true;
        }
        prefix_min = prefix_min.min(peak);
    }
    false
}

pub fn classify_phase(curve: &LossCurve, tol: Tolerances) -> Result<PhaseCell> {
    if curve.losses.len() < 3 {
        return Err(Error::domain(format!(
            "phase classification needs at least 3 points, got {}",
            curve.losses.len()
        )));
    }
    if curve.losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::domain("loss curve has non-finite values"));
    }
    let es = early_stopping_analysis(curve)?;
    let reference = curve.losses[0].abs();
    let (edd, early) = if reference > 0.0 {
        (
            has_rise_then_fall(&curve.losses, tol.rise * reference),
            es.es_gap >= tol.early_stop * reference,
        )
    } else {
        (false, false)
    };
    Ok(PhaseCell {
        lambda: curve.params.lambda,
        sigma: curve.params.sigma,
        phase: Phase::new(edd, early),
        t_early_stop: es.t_early_stop,
        loss_early_stop: es.loss_early_stop,
        loss_final: es.loss_final,
        es_gap: es.es_gap,
    })
}

/// Phase of the theory curve at `(λ, σ)`.
pub fn phase_at(lambda: f64, sigma: f64, rule: GammaRule, times: &[u64], tol: Tolerances) -> Result<PhaseCell> {
    let gamma = rule.gamma(lambda)?;
    classify_phase(
        &loss_curve_on_grid(lambda, sigma, gamma, DEFAULT_THRESHOLD, times)?,
        tol,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Row-major over `(σ, λ)`: cell `i·|λ| + j` has `σ_i`, `λ_j`.
    pub cells: Vec<PhaseCell>,
}

impl PhaseDiagram {
    fn surface(&self, f: impl Fn(&PhaseCell) -> f64) -> Array2<f64> {
        Array2::from_shape_fn((self.sigmas.len(), self.lambdas.len()), |(i, j)| {
            f(&self.cells[i * self.lambdas.len() + j])
        })
    }

    /// Rows are σ, columns are λ.
    pub fn loss_final(&self) -> Array2<f64> {
        self.surface(|c| c.loss_final)
    }

    pub fn loss_early_stop(&self) -> Array2<f64> {
        self.surface(|c| c.loss_early_stop)
    }

    pub fn es_gap(&self) -> Array2<f64> {
        self.surface(|c| c.es_gap)
    }

    /// Number of cells in each phase, in [`Phase::ALL`] order.
    pub fn phase_counts(&self) -> [(Phase, usize); 4] {
        Phase::ALL.map(|p| (p, self.cells.iter().filter(|c| c.phase == p).count()))
    }
}

/// One cell per `(σ, λ)`; cells are computed in parallel and returned in grid
/// order.
pub fn phase_diagram(
    lambdas: &[f64],
    sigmas: &[f64],
    rule: GammaRule,
    times: &[u64],
    tol: Tolerances,
) -> Result<PhaseDiagram> {
    if lambdas.is_empty() || sigmas.is_empty() {
        return Err(Error::domain("phase diagram grids must be nonempty"));
    }
    let integrators = lambdas
        .iter()
        .map(|&l| MpIntegrator::new(l, DEFAULT_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    let gammas = lambdas.iter().map(|&l| rule.gamma(l)).collect::<Result<Vec<_>>>()?;
    let cells = (0..sigmas.len() * lambdas.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / lambdas.len(), idx % lambdas.len());
            let losses = times
                .iter()
                .map(|&t| integrators[j].loss(t, sigmas[i], gammas[j]))
                .collect::<Result<Vec<_>>>()?;
            let curve = LossCurve::from_values(
                times.to_vec(),
                losses,
                CurveParams {
                    lambda: lambdas[j],
                    sigma: sigmas[i],
                    gamma: gammas[j],
                    threshold: DEFAULT_THRESHOLD,
                },
            )?;
            classify_phase(&curve, tol)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseDiagram {
        lambdas: lambdas.to_vec(),
        sigmas: sigmas.to_vec(),
        cells,
    })
}

/// Bisection for the boundary of a predicate that is false at `low` and true
/// at `high`. Returns the final bracket, no wider than `tol`.
pub fn bisect_boundary(
    mut low: f64,
    mut high: f64,
    tol: f64,
    mut predicate: impl FnMut(f64) -> Result<bool>,
) -> Result<(f64, f64)> {
    if predicate(low)? || !predicate(high)? {
        return Err(Error::domain(format!(
            "predicate does not change from false to true on [{low}, {high}]"
        )));
    }
    while high - low > tol {
        let mid = 0.5 * (low + high);
        if predicate(mid)? {
            high = mid;
        } else {
            low = mid;
        }
    }
    Ok((low, high))
}
