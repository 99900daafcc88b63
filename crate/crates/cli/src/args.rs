use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edd_core::empirics::{self, FeatureFilter, Sampler};
use edd_core::noise::{NoiseFamily, DEFAULT_THRESHOLD};
use edd_core::theory::{DEFAULT_POINTS, DEFAULT_T_MAX};
use serde::Serialize;

/// Epochwise double descent in a solvable linear model: theory curves, phase
/// diagrams, Monte Carlo runs and the two interventions.
#[derive(Debug, Parser)]
#[command(name = "edd", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expected test loss over training time.
    Curve(CurveArgs),
    /// Phase of every (λ, σ) cell on a grid.
    PhaseDiagram(PhaseDiagramArgs),
    /// Finite-size teacher–student Monte Carlo.
    Simulate(SimulateArgs),
    /// Replace a linear head by its converged cross-entropy solution.
    ConvergeHead(ConvergeHeadArgs),
    /// Project a data matrix onto its leading principal components.
    PcaFilter(PcaFilterArgs),
    /// Same Monte Carlo run under each noise family at matched σ.
    Ablation(AblationArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Curve(_) => "curve",
            Command::PhaseDiagram(_) => "phase-diagram",
            Command::Simulate(_) => "simulate",
            Command::ConvergeHead(_) => "converge-head",
            Command::PcaFilter(_) => "pca-filter",
            Command::Ablation(_) => "ablation",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TimeArgs {
    /// Last training step on the log-spaced grid.
    #[arg(long, default_value_t = DEFAULT_T_MAX)]
    pub t_max: u64,
    /// Number of grid points, including t = 0.
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub points: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ToleranceArgs {
    /// Minimum rise, relative to the initial loss, that counts as double descent.
    #[arg(long, default_value_t = 1e-3)]
    pub rise_tol: f64,
    /// Minimum final-minus-best gap, relative to the initial loss, that favors early stopping.
    #[arg(long, default_value_t = 1e-3)]
    pub es_tol: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CurveArgs {
    /// Aspect ratio D/N.
    #[arg(long)]
    pub lambda: f64,
    /// Noise variance per noisy mode.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Learning rate [default: 1/λ₊].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Eigenvalue threshold above which modes are noisy.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[command(flatten)]
    pub time: TimeArgs,
    #[command(flatten)]
    pub tol: ToleranceArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhaseDiagramArgs {
    #[arg(long, default_value_t = 0.2)]
    pub lambda_min: f64,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_max: f64,
    /// Lower end of the noise-variance axis.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 5.0)]
    pub sigma_max: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Overrides --steps on the λ axis.
    #[arg(long)]
    pub lambda_steps: Option<usize>,
    /// Overrides --steps on the σ axis.
    #[arg(long)]
    pub sigma_steps: Option<usize>,
    /// Learning rate as a fraction of 1/λ₊ in every column.
    #[arg(long, default_value_t = 1.0)]
    pub gamma_fraction: f64,
    #[command(flatten)]
    pub time: TimeArgs,
    #[command(flatten)]
    pub tol: ToleranceArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    #[value(alias = "thresholded")]
    EigenThresholded,
    Uniform,
    None,
}

impl From<FamilyArg> for NoiseFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::EigenThresholded => NoiseFamily::EigenThresholded,
            FamilyArg::Uniform => NoiseFamily::Uniform,
            FamilyArg::None => NoiseFamily::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerArg {
    Spectral,
    DataMatrix,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Spectral => Sampler::Spectral,
            SamplerArg::DataMatrix => Sampler::DataMatrix,
        }
    }
}

/// Seeds as `a..b` (half-open), `a..=b` or a comma-separated list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Seeds(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let bound = |v: &str| v.trim().parse::<u64>().map_err(|_| format!("invalid seed {v:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..=") {
        (bound(a)?..=bound(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (bound(a)?..bound(b)?).collect()
    } else {
        s.split(',').map(bound).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("seed range {s:?} is empty"));
    }
    Ok(Seeds(seeds))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McArgs {
    /// Aspect ratio D/N; D is rounded to the nearest integer.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Noise variance per noisy mode (theory units).
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Number of training samples.
    #[arg(long, default_value_t = empirics::DEFAULT_N)]
    pub n: usize,
    /// Number of output classes.
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
    #[arg(long, value_parser = parse_seeds, default_value = "0..20")]
    pub seeds: Seeds,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Learning rate [default: 1/λ₊].
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = SamplerArg::Spectral)]
    pub sampler: SamplerArg,
    /// Keep only the top k principal components of the training inputs
    /// (data-matrix sampler).
    #[arg(long, conflicts_with = "pca_above")]
    pub pca_k: Option<usize>,
    /// Keep only principal components with covariance eigenvalue above this
    /// value (data-matrix sampler).
    #[arg(long)]
    pub pca_above: Option<f64>,
    #[command(flatten)]
    pub time: TimeArgs,
    #[command(flatten)]
    pub tol: ToleranceArgs,
}

impl McArgs {
    pub fn filter(&self) -> FeatureFilter {
        match (self.pca_k, self.pca_above) {
            (Some(k), _) => FeatureFilter::PcaTopK(k),
            (None, Some(t)) => FeatureFilter::PcaAboveThreshold(t),
            (None, None) => FeatureFilter::None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub mc: McArgs,
    #[arg(long, value_enum, default_value_t = FamilyArg::EigenThresholded)]
    pub noise_family: FamilyArg,
    /// Also write the theory curve and z-scores on the same grid.
    #[arg(long)]
    pub compare_theory: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblationArgs {
    #[command(flatten)]
    pub mc: McArgs,
    /// Families to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FamilyArg::EigenThresholded, FamilyArg::Uniform, FamilyArg::None])]
    pub families: Vec<FamilyArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormatArg {
    Csv,
    Bin,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConvergeHeadArgs {
    /// Penultimate features, F×N matrix file.
    #[arg(long)]
    pub features: PathBuf,
    /// Class index per sample.
    #[arg(long)]
    pub labels: PathBuf,
    /// Initial head, C×F matrix file [default: zeros].
    #[arg(long)]
    pub w0: Option<PathBuf>,
    /// Number of classes [default: largest label + 1, or the rows of --w0].
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_enum, default_value_t = MatrixFormatArg::Csv)]
    pub format: MatrixFormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PcaFilterArgs {
    /// D×N data matrix file.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of components to keep.
    #[arg(long, required_unless_present = "above", conflicts_with = "above")]
    pub k: Option<usize>,
    /// Keep the components whose covariance eigenvalue exceeds this value.
    #[arg(long)]
    pub above: Option<f64>,
    #[arg(long, value_enum, default_value_t = MatrixFormatArg::Csv)]
    pub format: MatrixFormatArg,
    #[arg(long)]
    pub out: PathBuf,
}
