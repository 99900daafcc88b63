use std::collections::BTreeMap;
use std::fmt::Write as _;

use edd_core::dynamics::{self, LabelMatrix, MMatrix};
use edd_core::empirics::{self, ExperimentConfig};
use edd_core::matrix_io::{read_labels, read_matrix};
use edd_core::noise::NoiseSpec;
use edd_core::spectra::{decompose, mp_params};
use edd_core::theory::{self, GammaRule, PhaseCell, Tolerances};
use edd_core::{Error, Result};
use ndarray::Array2;
use serde::Serialize;

use crate::args::{
    AblationArgs, ConvergeHeadArgs, CurveArgs, McArgs, PcaFilterArgs, PhaseDiagramArgs, SimulateArgs, TimeArgs,
    ToleranceArgs,
};
use crate::output::{heatmap_csv, Manifest, Outputs};

/// What a command hands back to `main`: files to write, the manifest to
/// complete and a human-readable summary for stdout.
pub struct Finished {
    pub outputs: Outputs,
    pub manifest: Manifest,
    pub summary: String,
}

impl ToleranceArgs {
    fn tolerances(&self) -> Result<Tolerances> {
        for (name, v) in [("--rise-tol", self.rise_tol), ("--es-tol", self.es_tol)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(Tolerances {
            rise: self.rise_tol,
            early_stop: self.es_tol,
        })
    }
}

impl TimeArgs {
    fn grid(&self) -> Result<Vec<u64>> {
        theory::time_grid(self.t_max, self.points)
    }
}

/// `γ` or the default `1/λ₊`; `Unstable` at or beyond `2/λ₊`.
fn learning_rate(gamma: Option<f64>, lambda: f64) -> Result<f64> {
    let edge = mp_params(lambda)?.support_high;
    let gamma = match gamma {
        Some(g) => g,
        None => theory::default_learning_rate(lambda)?,
    };
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {gamma}")));
    }
    if gamma >= 2.0 / edge {
        return Err(Error::Unstable {
            gamma,
            gamma_max: 2.0 / edge,
        });
    }
    Ok(gamma)
}

fn describe(cell: &PhaseCell, initial: f64) -> String {
    format!(
        "phase {}: L(0) = {initial:.6}, best {:.6} at t = {}, final {:.6}",
        cell.phase, cell.loss_early_stop, cell.t_early_stop, cell.loss_final
    )
}

#[derive(Serialize)]
struct CurveSidecar<'a> {
    lambda: f64,
    sigma: f64,
    gamma: f64,
    gamma_max: f64,
    threshold: f64,
    tolerances: Tolerances,
    cell: &'a PhaseCell,
}

pub fn curve(args: &CurveArgs) -> Result<Finished> {
    let tol = args.tol.tolerances()?;
    let times = args.time.grid()?;
    let gamma = learning_rate(args.gamma, args.lambda)?;
    let curve = theory::loss_curve_on_grid(args.lambda, args.sigma, gamma, args.threshold, &times)?;
    let cell = theory::classify_phase(&curve, tol)?;
    let mut outputs = Outputs::default();
    outputs.text("curve.csv", curve.to_csv());
    outputs.json(
        "curve.json",
        &CurveSidecar {
            lambda: args.lambda,
            sigma: args.sigma,
            gamma,
            gamma_max: 2.0 / mp_params(args.lambda)?.support_high,
            threshold: args.threshold,
            tolerances: tol,
            cell: &cell,
        },
    )?;
    Ok(Finished {
        outputs,
        manifest: Manifest::new("curve", args, Vec::new())?,
        summary: describe(&cell, curve.losses[0]),
    })
}

fn linspace(lo: f64, hi: f64, n: usize, name: &str) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) || n == 0 {
        return Err(Error::Domain(format!(
            "invalid {name} range [{lo}, {hi}] with {n} steps"
        )));
    }
    Ok(match n {
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    })
}

#[derive(Serialize)]
struct PhaseDiagramJson<'a> {
    /// Axis conventions, spelled out for readers of the file.
    axes: Axes,
    lambdas: &'a [f64],
    sigmas: &'a [f64],
    sigmas_sqrt: Vec<f64>,
    sigmas_squared: Vec<f64>,
    gamma_rule: GammaRule,
    tolerances: Tolerances,
    times: &'a [u64],
    counts: BTreeMap<&'static str, usize>,
    cells: &'a [PhaseCell],
}

#[derive(Serialize)]
struct Axes {
    lambda: &'static str,
    sigma: &'static str,
    sigma_conventions: &'static str,
    heatmaps: &'static str,
}

pub fn phase_diagram(args: &PhaseDiagramArgs) -> Result<Finished> {
    let tol = args.tol.tolerances()?;
    let times = args.time.grid()?;
    let lambdas = linspace(
        args.lambda_min,
        args.lambda_max,
        args.lambda_steps.unwrap_or(args.steps),
        "lambda",
    )?;
    let sigmas = linspace(
        args.sigma_min,
        args.sigma_max,
        args.sigma_steps.unwrap_or(args.steps),
        "sigma",
    )?;
    if !(args.gamma_fraction > 0.0 && args.gamma_fraction < 2.0) {
        return Err(Error::Unstable {
            gamma: args.gamma_fraction,
            gamma_max: 2.0,
        });
    }
    let rule = GammaRule::EdgeFraction(args.gamma_fraction);
    let diagram = theory::phase_diagram(&lambdas, &sigmas, rule, &times, tol)?;
    let counts = diagram.phase_counts();
    let total = diagram.cells.len();

    let mut outputs = Outputs::default();
    outputs.json(
        "phase_cells.json",
        &PhaseDiagramJson {
            axes: Axes {
                lambda: "aspect ratio D/N",
                sigma: "noise variance per noisy mode; the sigma values are the variance itself, i.e. the quantity \
                        conventionally plotted as sigma^2, not a standard deviation",
                sigma_conventions: "the noise axis is labelled sigma^2 in the usual phase-diagram plots while the \
                                    loss uses sigma; sigmas_sqrt (read sigma as a variance, report its standard \
                                    deviation) and sigmas_squared (read sigma as a standard deviation, report its \
                                    square) give both readings of the same rows",
                heatmaps: "rows are sigma (increasing), columns are lambda (increasing)",
            },
            lambdas: &lambdas,
            sigmas: &sigmas,
            sigmas_sqrt: sigmas.iter().map(|s| s.sqrt()).collect(),
            sigmas_squared: sigmas.iter().map(|s| s * s).collect(),
            gamma_rule: rule,
            tolerances: tol,
            times: &times,
            counts: counts.iter().map(|(p, c)| (p.name(), *c)).collect(),
            cells: &diagram.cells,
        },
    )?;
    outputs.text("loss_final.csv", heatmap_csv(&lambdas, &sigmas, &diagram.loss_final()));
    outputs.text(
        "loss_early_stop.csv",
        heatmap_csv(&lambdas, &sigmas, &diagram.loss_early_stop()),
    );
    outputs.text("es_gap.csv", heatmap_csv(&lambdas, &sigmas, &diagram.es_gap()));

    let mut summary = format!("{total} cells ({} λ × {} σ)", lambdas.len(), sigmas.len());
    for (phase, count) in counts {
        let _ = write!(
            summary,
            "\n  {:<8} {count:>6}  {:5.1}%",
            phase.name(),
            100.0 * count as f64 / total as f64
        );
    }
    Ok(Finished {
        outputs,
        manifest: Manifest::new("phase-diagram", args, Vec::new())?,
        summary,
    })
}

fn experiment(mc: &McArgs, noise: NoiseSpec) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::new(mc.n, mc.lambda, noise, mc.seeds.0.clone())?;
    config.classes = mc.classes;
    config.noise.threshold = mc.threshold;
    config.gamma = learning_rate(mc.gamma, mc.lambda)?;
    config.time_grid = mc.time.grid()?;
    config.sampler = mc.sampler.into();
    config.filter = mc.filter();
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    config: &'a ExperimentConfig,
    /// Phase of the mean curve.
    cell: PhaseCell,
    double_descent: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_z: Option<f64>,
}

pub fn simulate(args: &SimulateArgs) -> Result<Finished> {
    let tol = args.mc.tol.tolerances()?;
    let noise = NoiseSpec::new(args.noise_family.into(), args.mc.sigma, 0);
    let config = experiment(&args.mc, noise)?;
    let stats = empirics::run_teacher_student(&config)?;
    let curve = stats.mean_curve(theory::CurveParams {
        lambda: config.lambda(),
        sigma: config.noise.sigma,
        gamma: config.gamma,
        threshold: config.noise.threshold,
    })?;
    let cell = theory::classify_phase(&curve, tol)?;

    let mut outputs = Outputs::default();
    outputs.text("stats.csv", stats.to_csv());
    outputs.text("per_seed.csv", stats.per_seed_csv());
    let mut summary = describe(&cell, stats.mean[0]);
    let max_abs_z = if args.compare_theory {
        let rows = empirics::compare_with_theory(&stats, &config)?;
        outputs.text("comparison.csv", empirics::comparison_csv(&rows));
        let worst = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
        let _ = write!(summary, "\nmax |z| against theory: {worst:.3}");
        Some(worst)
    } else {
        None
    };
    outputs.json(
        "summary.json",
        &SimulateSummary {
            config: &config,
            double_descent: cell.phase.has_double_descent(),
            cell,
            max_abs_z,
        },
    )?;
    Ok(Finished {
        outputs,
        manifest: Manifest::new("simulate", args, config.seeds.clone())?,
        summary,
    })
}

pub fn ablation(args: &AblationArgs) -> Result<Finished> {
    let tol = args.mc.tol.tolerances()?;
    let families: Vec<_> = args.families.iter().map(|&f| f.into()).collect();
    let noise = NoiseSpec::new(families[0], args.mc.sigma, 0);
    let config = experiment(&args.mc, noise)?;
    let report = empirics::edd_ablation_suite(&config, &families, tol)?;

    let mut csv = String::from("t");
    for e in &report.entries {
        let _ = write!(csv, ",mean_{0},stderr_{0}", e.family.name());
    }
    csv.push('\n');
    for (i, t) in config.time_grid.iter().enumerate() {
        let _ = write!(csv, "{t}");
        for e in &report.entries {
            let _ = write!(csv, ",{:?},{:?}", e.mean[i], e.stderr[i]);
        }
        csv.push('\n');
    }
    let mut outputs = Outputs::default();
    outputs.text("ablation.csv", csv);
    outputs.json("ablation.json", &report)?;
    let summary = report
        .entries
        .iter()
        .map(|e| {
            format!(
                "{:<18} {:<8} double descent: {}, final {:.6}",
                e.family.name(),
                e.cell.phase.name(),
                if e.double_descent { "yes" } else { "no" },
                e.cell.loss_final
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Finished {
        outputs,
        manifest: Manifest::new("ablation", args, config.seeds.clone())?,
        summary,
    })
}

#[derive(Serialize)]
struct HeadReport {
    classes: usize,
    features: usize,
    samples: usize,
    accuracy_before: f64,
    accuracy_after: f64,
    /// `max |M(w' − w)|` after one further linearized step.
    fixed_point_drift: f64,
}

pub fn converge_head(args: &ConvergeHeadArgs) -> Result<Finished> {
    let features = read_matrix(&args.features)?;
    let labels = read_labels(&args.labels)?;
    let w0 = args.w0.as_ref().map(read_matrix).transpose()?;
    let classes = match (args.classes, &w0) {
        (Some(c), _) => c,
        (None, Some(w)) => w.nrows(),
        (None, None) => labels.iter().max().map_or(0, |m| m + 1),
    };
    if labels.len() != features.ncols() {
        return Err(Error::Domain(format!(
            "{} labels for {} feature columns",
            labels.len(),
            features.ncols()
        )));
    }
    let labels = LabelMatrix::one_hot(&labels, classes)?;
    let w0 = w0.unwrap_or_else(|| Array2::zeros((classes, features.nrows())));
    let head = empirics::converged_last_layer(&features, &labels, &w0)?;

    let decomp = decompose(&features)?;
    let drift = if decomp.rank() == 0 {
        0.0
    } else {
        let step = dynamics::gd_step_xent_linearized(&head.weights, &features, &labels, 1.0 / decomp.max_eigenvalue())?;
        let m = MMatrix::new(classes);
        (m.apply(&step) - m.apply(&head.weights))
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
    };
    let mut outputs = Outputs::default();
    outputs.matrix("weights", &head.weights, args.format);
    outputs.json(
        "report.json",
        &HeadReport {
            classes,
            features: features.nrows(),
            samples: features.ncols(),
            accuracy_before: head.accuracy_before,
            accuracy_after: head.accuracy_after,
            fixed_point_drift: drift,
        },
    )?;
    Ok(Finished {
        outputs,
        manifest: Manifest::new("converge-head", args, Vec::new())?,
        summary: format!(
            "training top-1 accuracy {:.4} -> {:.4}; fixed-point drift {drift:.2e}",
            head.accuracy_before, head.accuracy_after
        ),
    })
}

#[derive(Serialize)]
struct VarianceReport<'a> {
    k: usize,
    features: usize,
    samples: usize,
    explained_variance_ratio: f64,
    /// Covariance eigenvalues, descending.
    eigenvalues: &'a [f64],
    mean: &'a [f64],
}

pub fn pca_filter(args: &PcaFilterArgs) -> Result<Finished> {
    let x = read_matrix(&args.input)?;
    let pca = match (args.k, args.above) {
        (Some(k), _) => empirics::pca_filter(&x, k)?,
        (None, Some(t)) => empirics::pca_filter_above(&x, t)?,
        (None, None) => return Err(Error::Domain("one of --k or --above is required".into())),
    };
    let k = pca.components.ncols();
    let mut outputs = Outputs::default();
    outputs.matrix("filtered", &pca.filtered, args.format);
    outputs.matrix("components", &pca.components, args.format);
    outputs.json(
        "explained_variance.json",
        &VarianceReport {
            k,
            features: x.nrows(),
            samples: x.ncols(),
            explained_variance_ratio: pca.explained_variance_ratio,
            eigenvalues: pca.eigenvalues.as_slice().unwrap_or(&[]),
            mean: pca.mean.as_slice().unwrap_or(&[]),
        },
    )?;
    Ok(Finished {
        outputs,
        manifest: Manifest::new("pca-filter", args, Vec::new())?,
        summary: format!(
            "kept {k} of {} components, explained variance {:.4}",
            x.nrows(),
            pca.explained_variance_ratio
        ),
    })
}
