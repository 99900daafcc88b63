//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use edd_core::dynamics::{
    class_mean, converged_xent_weights, gd_step_mse, gd_step_xent_exact, gd_step_xent_linearized, predict_classes,
    solve_trajectory, LabelMatrix, LossKind, MMatrix,
};
use edd_core::empirics::{
    self, compare_with_theory, pca_filter, pca_filter_above, run_teacher_student, ExperimentConfig, FeatureFilter,
    Sampler,
};
use edd_core::noise::{self, NoiseFamily, NoiseSpec, PermutationMask};
use edd_core::rng::derive_seed;
use edd_core::spectra::{decompose, pseudo_solve, sample_gaussian_data};
use edd_core::theory::{
    self, bisect_boundary, classify_phase, expected_test_loss, phase_at, time_grid, CurveParams, GammaRule, Phase,
    Tolerances,
};
use ndarray::Array2;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    sample_gaussian_data(cols, rows, seed).expect("gaussian sample")
}

fn one_hot(n: usize, c: usize, seed: u64) -> LabelMatrix {
    let classes: Vec<usize> = (0..n)
        .map(|j| (derive_seed(seed, j as u64) % c as u64) as usize)
        .collect();
    LabelMatrix::one_hot(&classes, c).expect("labels")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn closed_form_vs_iteration() -> Outcome {
    let mut worst = 0.0f64;
    for instance in 0..50u64 {
        let seed = derive_seed(1, instance);
        let pick = |k: u64, lo: u64, hi: u64| lo + derive_seed(seed, k) % (hi - lo + 1);
        let (c, f, n) = (pick(0, 2, 8) as usize, pick(1, 1, 8) as usize, pick(2, 1, 8) as usize);
        let t = pick(3, 0, 200);
        let kind = if instance % 2 == 0 {
            LossKind::Mse
        } else {
            LossKind::XentLinearized
        };
        let phi = random(f, n, derive_seed(seed, 10));
        let w0 = random(c, f, derive_seed(seed, 11));
        let decomp = decompose(&phi).map_err(err)?;
        let gamma = 1.9 / decomp.max_eigenvalue();
        let labels = match kind {
            LossKind::Mse => LabelMatrix::real(random(c, n, derive_seed(seed, 12))),
            LossKind::XentLinearized => one_hot(n, c, seed),
        };
        let traj = solve_trajectory(&phi, &labels, &w0, gamma, kind).map_err(err)?;
        let mut w = w0.clone();
        for _ in 0..t {
            w = match kind {
                LossKind::Mse => gd_step_mse(&w, &phi, labels.values(), gamma),
                LossKind::XentLinearized => gd_step_xent_linearized(&w, &phi, &labels, gamma),
            }
            .map_err(err)?;
        }
        let rel = max_abs(&(traj.evaluate_at(t) - &w)) / max_abs(&w).max(1e-300);
        worst = worst.max(rel);
    }
    check(
        worst <= 1e-9,
        format!("max relative error {worst:.2e} over 50 instances"),
    )
}

fn anchor_values() -> Outcome {
    let mut worst_initial = 0.0f64;
    for lambda in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let gamma = theory::default_learning_rate(lambda).map_err(err)?;
        for sigma in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let l = expected_test_loss(0, lambda, sigma, gamma).map_err(err)?;
            worst_initial = worst_initial.max((l - 0.5).abs());
        }
    }
    let over =
        expected_test_loss(1_000_000, 2.0, 0.0, theory::default_learning_rate(2.0).map_err(err)?).map_err(err)?;
    let under =
        expected_test_loss(1_000_000, 0.5, 0.0, theory::default_learning_rate(0.5).map_err(err)?).map_err(err)?;
    check(
        worst_initial <= 1e-7 && (over - 0.25).abs() <= 1e-6 && under <= 1e-6,
        format!("|L(0)-0.5| <= {worst_initial:.1e}, L(λ=2,σ=0) = {over:.9}, L(λ=0.5,σ=0) = {under:.1e}"),
    )
}

fn theory_vs_monte_carlo() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (lambda, sigma) in [(0.5, 0.0), (1.0, 1.0), (1.0, 4.0), (2.0, 1.0)] {
        let noise = NoiseSpec::new(NoiseFamily::EigenThresholded, sigma, 0);
        let config = ExperimentConfig::new(4000, lambda, noise, (0..20).collect()).map_err(err)?;
        let stats = run_teacher_student(&config).map_err(err)?;
        let rows = compare_with_theory(&stats, &config).map_err(err)?;
        let worst = rows
            .iter()
            .max_by(|a, b| a.z.abs().total_cmp(&b.z.abs()))
            .ok_or("empty comparison")?;
        ok &= worst.z.abs() <= 3.0;
        lines.push(format!(
            "(λ={lambda}, σ={sigma}) max|z|={:.2} at t={} (mc {:.5e}, theory {:.5e})",
            worst.z.abs(),
            worst.t,
            worst.mean,
            worst.theory
        ));
    }
    check(ok, lines.join("; "))
}

fn phase_structure() -> Outcome {
    let times = time_grid(theory::DEFAULT_T_MAX, theory::DEFAULT_POINTS).map_err(err)?;
    let tol = Tolerances::default();
    let rule = GammaRule::default();
    let phase = |sigma: f64| phase_at(1.0, sigma, rule, &times, tol).map(|c| c.phase);
    let clean = phase(0.0).map_err(err)?;
    let (c1_low, c1_high) = bisect_boundary(0.0, 8.0, 0.05, |s| Ok(phase(s)?.has_double_descent())).map_err(err)?;
    let (c2_low, c2_high) = bisect_boundary(c1_high, 8.0, 0.05, |s| Ok(phase(s)? == Phase::EddEs)).map_err(err)?;
    // the sweep must agree with the bracketed boundaries
    let mut consistent = true;
    for k in 0..=32 {
        let s = k as f64 * 0.25;
        let p = phase(s).map_err(err)?;
        if s <= c1_low {
            consistent &= !p.has_double_descent();
        } else if s >= c1_high {
            consistent &= p.has_double_descent();
        }
        if s >= c2_high {
            consistent &= p == Phase::EddEs;
        }
    }
    check(
        clean == Phase::NddNes && c1_low > 0.0 && c2_low >= c1_high && consistent,
        format!(
            "σ=0 is {clean}; σ_c1 in ({c1_low:.4}, {c1_high:.4}); σ_c2 in ({c2_low:.4}, {c2_high:.4}); sweep consistent: {consistent}"
        ),
    )
}

fn noise_ablation() -> Outcome {
    let noise = NoiseSpec::new(NoiseFamily::EigenThresholded, 2.0, 0);
    let config = ExperimentConfig::new(4000, 1.0, noise, (0..20).collect()).map_err(err)?;
    let report = empirics::edd_ablation_suite(&config, &NoiseFamily::ALL, Tolerances::default()).map_err(err)?;
    let entry = |f| report.entry(f).ok_or(format!("missing {f:?}"));
    let thresholded = entry(NoiseFamily::EigenThresholded)?;
    let uniform = entry(NoiseFamily::Uniform)?;
    let clean = entry(NoiseFamily::None)?;
    let monotone = clean.mean.windows(2).all(|w| w[1] <= w[0]);
    check(
        thresholded.double_descent && !uniform.double_descent && monotone,
        format!(
            "thresholded {}, uniform {}, none {} (monotone: {monotone})",
            thresholded.cell.phase, uniform.cell.phase, clean.cell.phase
        ),
    )
}

fn commutator_identity() -> Outcome {
    let (mut identity, mut recon) = (0.0f64, 0.0f64);
    for instance in 0..20u64 {
        let seed = derive_seed(7, instance);
        let (d, n) = (2 + (seed % 9) as usize, 2 + (derive_seed(seed, 1) % 11) as usize);
        let x = random(d, n, seed);
        let mask = PermutationMask::random(n, 0.3, derive_seed(seed, 2)).map_err(err)?;
        let split = noise::permutation_noise_decomposition(&x, &mask).map_err(err)?;
        let direct = mask.to_dense().dot(&x.t());
        identity = identity.max(split.commutator_identity_error);
        recon = recon.max(max_abs(&(split.reconstruction() - &direct)));
    }
    check(
        identity <= 1e-12 && recon <= 1e-10,
        format!("max |[F,V] − V⊙D| = {identity:.1e}, max reconstruction error {recon:.1e}"),
    )
}

fn high_temperature_limit() -> Outcome {
    let mut ratios = Vec::new();
    let (mut xent_mean, mut mse_mean) = (0.0f64, 0.0f64);
    for instance in 0..10u64 {
        let seed = derive_seed(8, instance);
        let (c, f, n) = (3 + (instance % 3) as usize, 5, 9);
        let phi = random(f, n, seed);
        let w = random(c, f, derive_seed(seed, 1));
        let labels = one_hot(n, c, seed);
        // γβ held fixed; the linearized step absorbs β²/C with α = β
        let error = |beta: f64| -> Result<f64, String> {
            let gamma = 0.2 / beta;
            let exact = gd_step_xent_exact(&w, &phi, &labels, gamma, beta, beta).map_err(err)?;
            let linear = gd_step_xent_linearized(&w, &phi, &labels, gamma * beta * beta / c as f64).map_err(err)?;
            Ok((exact - linear).iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        ratios.push(error(0.02)? / error(0.01)?);

        let gamma = 0.5 / decompose(&phi).map_err(err)?.max_eigenvalue();
        let stepped = gd_step_xent_linearized(&w, &phi, &labels, gamma).map_err(err)?;
        xent_mean = xent_mean.max(max_abs(&(class_mean(&stepped) - class_mean(&w))));

        // class-mean-free targets leave the class mean to decay on its own
        let target = labels.xent_target().map_err(err)?;
        let stepped = gd_step_mse(&w, &phi, &target, gamma).map_err(err)?;
        let propagator = Array2::<f64>::eye(f) - phi.dot(&phi.t()) * (gamma / n as f64);
        let predicted = class_mean(&w).dot(&propagator);
        mse_mean = mse_mean.max(max_abs(&(class_mean(&stepped) - predicted)));
    }
    let ratios_ok = ratios.iter().all(|r| (r - 4.0).abs() <= 0.8);
    check(
        ratios_ok && xent_mean <= 1e-14 && mse_mean <= 1e-12,
        format!(
            "error ratios {}; linearized class-mean drift {xent_mean:.1e}; MSE class-mean propagator error {mse_mean:.1e}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(",")
        ),
    )
}

fn converged_head() -> Outcome {
    let (mut drift, mut agree) = (0.0f64, true);
    for instance in 0..20u64 {
        let seed = derive_seed(9, instance);
        let (c, f, n) = (
            2 + (instance % 5) as usize,
            4 + (instance % 7) as usize,
            12 + (instance % 9) as usize,
        );
        let phi = random(f, n, seed);
        let labels = one_hot(n, c, seed);
        let w0 = random(c, f, derive_seed(seed, 1));
        let converged = converged_xent_weights(&phi, &labels, &w0).map_err(err)?;
        let gamma = 1.0 / decompose(&phi).map_err(err)?.max_eigenvalue();
        let next = gd_step_xent_linearized(&converged, &phi, &labels, gamma).map_err(err)?;
        let m = MMatrix::new(c);
        drift = drift.max(max_abs(&(m.apply(&next) - m.apply(&converged))));
        let mse = pseudo_solve(&phi, &labels.xent_target().map_err(err)?).map_err(err)?;
        agree &= predict_classes(&converged, &phi) == predict_classes(&mse, &phi);
    }
    check(
        drift < 1e-8 && agree,
        format!("max M·w drift after one step {drift:.1e}; argmax agreement: {agree}"),
    )
}

fn pca_intervention() -> Outcome {
    let x = random(30, 80, 11);
    let full = pca_filter(&x, 30).map_err(err)?;
    let round_trip = max_abs(&(full.filtered - &x));
    let ratios: Vec<f64> = (0..=30)
        .map(|k| pca_filter(&x, k).map(|p| p.explained_variance_ratio))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let monotone = ratios.windows(2).all(|w| w[1] >= w[0]);
    // the filter keeps the same components as the noise threshold
    let kept = pca_filter_above(&x, 1.0).map_err(err)?.components.ncols();

    let noise = NoiseSpec::new(NoiseFamily::EigenThresholded, 3.0, 0);
    let mut config = ExperimentConfig::new(500, 1.0, noise, (0..20).collect()).map_err(err)?;
    config.sampler = Sampler::DataMatrix;
    let tol = Tolerances::default();
    let classify = |config: &ExperimentConfig| -> Result<theory::PhaseCell, String> {
        let stats = run_teacher_student(config).map_err(err)?;
        let curve = stats
            .mean_curve(CurveParams {
                lambda: config.lambda(),
                sigma: config.noise.sigma,
                gamma: config.gamma,
                threshold: config.noise.threshold,
            })
            .map_err(err)?;
        classify_phase(&curve, tol).map_err(err)
    };
    let raw = classify(&config)?;
    config.filter = FeatureFilter::PcaAboveThreshold(config.noise.threshold);
    let filtered = classify(&config)?;
    check(
        round_trip <= 1e-8
            && monotone
            && kept > 0
            && raw.phase.has_double_descent()
            && !filtered.phase.has_double_descent()
            && filtered.loss_final > raw.loss_final,
        format!(
            "round trip {round_trip:.1e}, monotone {monotone}; unfiltered {} (final {:.4}), filtered {} (final {:.4})",
            raw.phase, raw.loss_final, filtered.phase, filtered.loss_final
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (
            "closed form vs iteration",
            Duration::from_secs(5),
            closed_form_vs_iteration,
        ),
        ("analytic anchors", Duration::from_secs(10), anchor_values),
        ("theory vs Monte Carlo", Duration::from_secs(300), theory_vs_monte_carlo),
        ("phase structure at λ=1", Duration::from_secs(120), phase_structure),
        ("noise-model ablation", Duration::from_secs(300), noise_ablation),
        ("commutator identity", Duration::from_secs(1), commutator_identity),
        ("high-temperature limit", Duration::from_secs(2), high_temperature_limit),
        ("converged-head fixed point", Duration::from_secs(5), converged_head),
        ("PCA intervention", Duration::from_secs(300), pca_intervention),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= *budget;
        let (status, detail) = match &outcome {
            Ok(d) if in_budget => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {budget:?} budget")),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!(
            "criterion {}: {status} [{name}] {detail} ({:.2}s)",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
