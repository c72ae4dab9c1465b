use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpme_core::simbench::{CovariateScale, ScenarioKind};
use dpme_core::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dpme", version, about = "Debiased profile M-estimation for high-dimensional models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads. Falls back to DPME_THREADS, then to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// TOML file with defaults for any flag; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Debiased estimates, standard errors and intervals for selected coefficients.
    Fit(FitArgs),
    /// Monte Carlo coverage study on one of the built-in designs.
    Simulate(SimulateArgs),
    /// Treatment-rule coefficients with repeated sample splitting.
    Itr(ItrArgs),
    /// Re-aggregates a simulation JSON report into its summary table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Linear,
    Logistic,
    Itr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScaleArg {
    Raw,
    Standardized,
}

impl From<ScaleArg> for CovariateScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Raw => CovariateScale::Raw,
            ScaleArg::Standardized => CovariateScale::Standardized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioArg {
    Linear,
    Logistic,
    Itr,
}

impl From<ScenarioArg> for ScenarioKind {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Linear => ScenarioKind::Linear,
            ScenarioArg::Logistic => ScenarioKind::Logistic,
            ScenarioArg::Itr => ScenarioKind::Itr,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    /// Output path; `.csv`, `.json` and `.log` files are written next to it.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Response column (default `y`).
    #[arg(long)]
    pub response: Option<String>,
    /// Treatment column coded -1/+1 or 0/1 (default `a` for treatment rules).
    #[arg(long)]
    pub treatment: Option<String>,
    /// Covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Target coefficients by column name or zero-based index (default: all).
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// Z-score every covariate before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// Append an unpenalized intercept column.
    #[arg(long)]
    pub intercept: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimationArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed penalty level; skips cross-validation.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub kkt_tol: Option<f64>,
    #[arg(long)]
    pub lambda_grid_size: Option<usize>,
    #[arg(long)]
    pub lambda_min_ratio: Option<f64>,
    /// First-difference step (default 0.75 n^-0.26).
    #[arg(long)]
    pub h1: Option<f64>,
    /// Second-difference step (default 0.75 n^-0.26).
    #[arg(long)]
    pub h2: Option<f64>,
    /// Use plain backward differences in the one-step update.
    #[arg(long)]
    pub no_curvature_correction: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[arg(long, value_enum)]
    pub family: Option<FamilyKind>,
    /// Two-sided level of the reported intervals.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Debias all targets jointly instead of one coordinate at a time.
    #[arg(long)]
    pub joint: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Zero-based coefficient indices to study (default 0 and 5).
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub covariate_scale: Option<ScaleArg>,
    /// Draws used to approximate the treatment-rule truth.
    #[arg(long)]
    pub truth_mc: Option<usize>,
    /// Directory for caching the treatment-rule truth between runs.
    #[arg(long)]
    pub truth_cache: Option<PathBuf>,
    #[command(flatten)]
    pub estimation: EstimationArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ItrArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    /// Sample splits to combine.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Drop a covariate whose absolute correlation with an earlier one exceeds this.
    #[arg(long)]
    pub prune_threshold: Option<f64>,
    /// Covariates kept by each screening step of the nuisance fits.
    #[arg(long)]
    pub screen_k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// JSON written by `dpme simulate`.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// A coefficient named by column or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetKey {
    Index(usize),
    Name(String),
}

/// Flat key-value settings shared by the config file and the flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub family: Option<FamilyKind>,
    pub response: Option<String>,
    pub treatment: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub targets: Option<Vec<TargetKey>>,
    pub standardize: Option<bool>,
    pub intercept: Option<bool>,
    pub alpha: Option<f64>,
    pub joint: Option<bool>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub cv_folds: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub kkt_tol: Option<f64>,
    pub lambda_grid_size: Option<usize>,
    pub lambda_min_ratio: Option<f64>,
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub curvature_correction: Option<bool>,
    pub scenario: Option<ScenarioArg>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub reps: Option<usize>,
    pub covariate_scale: Option<ScaleArg>,
    pub truth_mc: Option<usize>,
    pub truth_cache: Option<PathBuf>,
    pub repeats: Option<usize>,
    pub prune_threshold: Option<f64>,
    pub screen_k: Option<usize>,
    pub threads: Option<usize>,
}

macro_rules! prefer {
    ($a:ident, $b:ident, $($f:ident),* $(,)?) => {
        Settings { $($f: $a.$f.or($b.$f)),* }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    /// Field-wise `self` if set, else `other`.
    pub fn or(self, other: Settings) -> Settings {
        prefer!(
            self, other, input, output, family, response, treatment, covariates, targets, standardize, intercept,
            alpha, joint, seed, lambda, cv_folds, max_iter, tol, kkt_tol, lambda_grid_size, lambda_min_ratio, h1, h2,
            curvature_correction, scenario, n, p, reps, covariate_scale, truth_mc, truth_cache, repeats,
            prune_threshold, screen_k, threads,
        )
    }

    fn with_data(mut self, d: &DataArgs) -> Self {
        self.input = d.input.clone();
        self.output = d.output.clone();
        self.response = d.response.clone();
        self.treatment = d.treatment.clone();
        self.covariates = d.covariates.clone();
        self.targets = d
            .targets
            .as_ref()
            .map(|t| t.iter().map(|s| TargetKey::Name(s.clone())).collect());
        self.standardize = d.standardize.then_some(true);
        self.intercept = d.intercept.then_some(true);
        self
    }

    fn with_estimation(mut self, e: &EstimationArgs) -> Self {
        self.seed = e.seed;
        self.lambda = e.lambda;
        self.cv_folds = e.cv_folds;
        self.max_iter = e.max_iter;
        self.tol = e.tol;
        self.kkt_tol = e.kkt_tol;
        self.lambda_grid_size = e.lambda_grid_size;
        self.lambda_min_ratio = e.lambda_min_ratio;
        self.h1 = e.h1;
        self.h2 = e.h2;
        self.curvature_correction = e.no_curvature_correction.then_some(false);
        self
    }

    /// The settings given on the command line.
    pub fn from_cli(cli: &Cli) -> Self {
        let base = Settings {
            threads: cli.threads,
            ..Settings::default()
        };
        match &cli.command {
            Command::Fit(a) => {
                let mut s = base.with_data(&a.data).with_estimation(&a.estimation);
                s.family = a.family;
                s.alpha = a.alpha;
                s.joint = a.joint.then_some(true);
                s
            }
            Command::Simulate(a) => {
                let mut s = base.with_estimation(&a.estimation);
                s.output = a.output.clone();
                s.scenario = a.scenario;
                s.n = a.n;
                s.p = a.p;
                s.reps = a.reps;
                s.targets = a.targets.as_ref().map(|t| t.iter().map(|&i| TargetKey::Index(i)).collect());
                s.covariate_scale = a.covariate_scale;
                s.truth_mc = a.truth_mc;
                s.truth_cache = a.truth_cache.clone();
                s
            }
            Command::Itr(a) => {
                let mut s = base.with_data(&a.data).with_estimation(&a.estimation);
                s.repeats = a.repeats;
                s.prune_threshold = a.prune_threshold;
                s.screen_k = a.screen_k;
                s
            }
            Command::Report(a) => Settings {
                input: a.input.clone(),
                output: a.output.clone(),
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Fit,
    Simulate,
    Itr,
    Report,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    #[serde(skip)]
    pub input: Option<PathBuf>,
    /// Output stem; the run writes `<stem>.csv`, `<stem>.json` and `<stem>.log`.
    #[serde(skip)]
    pub output: PathBuf,
    pub family: FamilyKind,
    pub response: String,
    pub treatment: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub targets: Option<Vec<TargetKey>>,
    pub standardize: bool,
    pub intercept: bool,
    pub alpha: f64,
    pub joint: bool,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub solver: SolverConfig,
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub curvature_correction: bool,
    pub scenario: ScenarioArg,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub covariate_scale: ScaleArg,
    pub truth_mc: usize,
    #[serde(skip)]
    pub truth_cache: Option<PathBuf>,
    pub repeats: usize,
    pub prune_threshold: f64,
    pub screen_k: usize,
    #[serde(skip)]
    pub threads: Option<usize>,
}

fn output_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv" | "json" | "log") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> CliResult<Self> {
        let file = match &cli.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        let env_threads = match std::env::var("DPME_THREADS") {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::input(format!("DPME_THREADS must be a positive integer, got '{v}'")))?,
            ),
            _ => None,
        };
        let s = Settings::from_cli(cli).or(file);
        let command = match cli.command {
            Command::Fit(_) => CommandKind::Fit,
            Command::Simulate(_) => CommandKind::Simulate,
            Command::Itr(_) => CommandKind::Itr,
            Command::Report(_) => CommandKind::Report,
        };
        let family = match command {
            CommandKind::Itr => FamilyKind::Itr,
            _ => s.family.unwrap_or(FamilyKind::Linear),
        };
        let defaults = SolverConfig::default();
        let solver = SolverConfig {
            max_iter: s.max_iter.unwrap_or(defaults.max_iter),
            tol: s.tol.unwrap_or(defaults.tol),
            kkt_tol: s.kkt_tol.unwrap_or(defaults.kkt_tol),
            cv_folds: s.cv_folds.unwrap_or(defaults.cv_folds),
            lambda_grid_size: s.lambda_grid_size.unwrap_or(defaults.lambda_grid_size),
            lambda_min_ratio: s.lambda_min_ratio.unwrap_or(defaults.lambda_min_ratio),
            seed: s.seed.unwrap_or(defaults.seed),
            ..defaults
        };
        let output = s
            .output
            .as_deref()
            .map(output_stem)
            .ok_or_else(|| CliError::input("an output path is required (--output)"))?;
        let config = RunConfig {
            command,
            input: s.input,
            output,
            family,
            response: s.response.unwrap_or_else(|| "y".into()),
            treatment: match family {
                FamilyKind::Itr => Some(s.treatment.unwrap_or_else(|| "a".into())),
                _ => s.treatment,
            },
            covariates: s.covariates,
            targets: s.targets,
            standardize: s.standardize.unwrap_or(false),
            intercept: s.intercept.unwrap_or(false),
            alpha: s.alpha.unwrap_or(0.05),
            joint: s.joint.unwrap_or(false),
            seed: s.seed.unwrap_or(0),
            lambda: s.lambda,
            solver,
            h1: s.h1,
            h2: s.h2,
            curvature_correction: s.curvature_correction.unwrap_or(true),
            scenario: s.scenario.unwrap_or(ScenarioArg::Linear),
            n: s.n.unwrap_or(1000),
            p: s.p.unwrap_or(100),
            reps: s.reps.unwrap_or(100),
            covariate_scale: s.covariate_scale.unwrap_or(ScaleArg::Standardized),
            truth_mc: s.truth_mc.unwrap_or(1_000_000),
            truth_cache: s.truth_cache,
            repeats: s.repeats.unwrap_or(5),
            prune_threshold: s.prune_threshold.unwrap_or(0.8),
            screen_k: s.screen_k.unwrap_or(4),
            threads: cli.threads.or(env_threads).or(s.threads),
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks values and paths before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(CliError::input(format!("alpha must lie in (0, 0.5), got {}", self.alpha)));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(CliError::input(format!("lambda must be finite and nonnegative, got {l}")));
            }
        }
        self.solver.validate()?;
        if self.threads == Some(0) {
            return Err(CliError::input("threads must be at least 1"));
        }
        match self.command {
            CommandKind::Simulate => {
                if self.reps == 0 {
                    return Err(CliError::input("reps must be at least 1"));
                }
            }
            CommandKind::Itr => {
                if self.repeats == 0 {
                    return Err(CliError::input("repeats must be at least 1"));
                }
                if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
                    return Err(CliError::input("prune threshold must lie in (0, 1)"));
                }
            }
            _ => {}
        }
        if self.command != CommandKind::Simulate {
            let input = self
                .input
                .as_deref()
                .ok_or_else(|| CliError::input("an input file is required (--input)"))?;
            if !input.is_file() {
                return Err(CliError::input(format!("input file {} does not exist", input.display())));
            }
        }
        if self.output.file_name().is_none() {
            return Err(CliError::input(format!("output path {} has no file name", self.output.display())));
        }
        let parent = self.output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(CliError::input(format!("output directory {} does not exist", parent.display())));
        }
        Ok(())
    }

    pub fn output_file(&self, extension: &str) -> PathBuf {
        let mut name = self.output.file_name().unwrap_or_default().to_os_string();
        name.push(".");
        name.push(extension);
        self.output.with_file_name(name)
    }
}
