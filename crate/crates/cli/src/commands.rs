use std::path::Path;

use dpme_core::debias::{run_dpme, run_dpme_marginal, DebiasResult, DpmeConfig};
use dpme_core::itr::{fit_itr_dpme, prune_correlated_columns, repeated_split_analysis, ItrConfig};
use dpme_core::simbench::{aggregate, run_scenario, Scenario, SimConfig, SimReport};
use dpme_core::stats::normal_quantile;
use dpme_core::{Dataset, ModelSpec};
use serde::Serialize;

use crate::config::{FamilyKind, RunConfig, TargetKey};
use crate::error::{CliError, CliResult};
use crate::ingest::{ingest_csv, Ingested, Schema};

pub const FIT_HEADER: [&str; 7] = ["coordinate", "theta_init", "theta_debiased", "se", "ci_low", "ci_high", "p_value"];
pub const ITR_HEADER: [&str; 4] = ["covariate", "coefficient", "se", "p_value"];
const INTERCEPT_NAME: &str = "(intercept)";

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    write_file(path, &text)
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| CliError::Core(e.into());
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(row).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn dpme_config(config: &RunConfig) -> DpmeConfig {
    DpmeConfig {
        solver: config.solver.clone(),
        h1: config.h1,
        h2: config.h2,
        lambda: config.lambda,
        alpha_levels: vec![config.alpha],
        curvature_correction: config.curvature_correction,
    }
}

fn itr_config(config: &RunConfig) -> ItrConfig {
    ItrConfig {
        dpme: dpme_config(config),
        screen_k: config.screen_k,
        ..ItrConfig::default()
    }
}

fn load(config: &RunConfig) -> CliResult<Ingested> {
    let schema = Schema {
        response: config.response.clone(),
        treatment: config.treatment.clone(),
        covariates: config.covariates.clone(),
    };
    let input = config.input.as_deref().ok_or_else(|| CliError::input("an input file is required"))?;
    let data = ingest_csv(input, &schema, config.standardize)?;
    log::info!(
        "read {} rows and {} covariates from {}",
        data.dataset.n(),
        data.dataset.p(),
        input.display()
    );
    Ok(data)
}

/// Maps target names or indices to column positions, keeping the given order.
pub fn resolve_targets(keys: &[TargetKey], names: &[String]) -> CliResult<Vec<usize>> {
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let j = match key {
            TargetKey::Index(i) => *i,
            TargetKey::Name(s) => match names.iter().position(|n| n == s) {
                Some(j) => j,
                None => s
                    .parse::<usize>()
                    .map_err(|_| CliError::input(format!("target '{s}' is neither a covariate name nor an index")))?,
            },
        };
        if j >= names.len() {
            return Err(CliError::input(format!(
                "target index {j} is out of range for {} covariates",
                names.len()
            )));
        }
        if out.contains(&j) {
            return Err(CliError::input(format!("target '{}' is listed twice", names[j])));
        }
        out.push(j);
    }
    if out.is_empty() {
        return Err(CliError::input("no target coefficients selected"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateRow {
    pub name: String,
    pub theta_init: f64,
    pub theta_debiased: f64,
    pub se: f64,
    pub p_value: f64,
}

impl CoordinateRow {
    fn cells(&self, z: f64) -> Vec<String> {
        vec![
            self.name.clone(),
            self.theta_init.to_string(),
            self.theta_debiased.to_string(),
            self.se.to_string(),
            (self.theta_debiased - z * self.se).to_string(),
            (self.theta_debiased + z * self.se).to_string(),
            self.p_value.to_string(),
        ]
    }
}

#[derive(Serialize)]
struct Diagnostics {
    coordinates: Vec<String>,
    lambda: f64,
    h1: f64,
    h2: f64,
    initial_iterations: usize,
    profile_fits: usize,
    cache_hits: usize,
    ridge_used: bool,
}

impl Diagnostics {
    fn from_result(r: &DebiasResult, names: &[String]) -> Self {
        Diagnostics {
            coordinates: r.targets.iter().map(|&j| names[j].clone()).collect(),
            lambda: r.lambda,
            h1: r.h1,
            h2: r.h2,
            initial_iterations: r.initial_iterations,
            profile_fits: r.profile_fits,
            cache_hits: r.cache_hits,
            ridge_used: r.ridge_used,
        }
    }
}

#[derive(Serialize)]
struct FitSidecar<'a> {
    config: &'a RunConfig,
    n: usize,
    p: usize,
    covariates: &'a [String],
    fits: Vec<Diagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    treatment_rule: Option<ItrSummary>,
}

#[derive(Serialize)]
struct ItrSummary {
    value_estimate: f64,
    halves: Vec<HalfSummary>,
}

#[derive(Serialize)]
struct HalfSummary {
    screened_propensity: Vec<String>,
    screened_outcome: Vec<String>,
    bandwidth: f64,
    lambda: f64,
}

fn linear_rows(results: &[DebiasResult], names: &[String]) -> Vec<CoordinateRow> {
    results
        .iter()
        .flat_map(|r| {
            r.targets.iter().enumerate().map(move |(t, &j)| CoordinateRow {
                name: names[j].clone(),
                theta_init: r.theta_init[t],
                theta_debiased: r.theta_debiased[t],
                se: r.se[t],
                p_value: r.p_values[t],
            })
        })
        .collect()
}

/// Debiased estimates for the selected coefficients.
pub fn cmd_fit(config: &RunConfig) -> CliResult<()> {
    let Ingested { mut dataset, mut covariates } = load(config)?;
    let n_covariates = covariates.len();
    if config.intercept && config.family != FamilyKind::Itr {
        dataset = dataset.with_intercept_column();
        covariates.push(INTERCEPT_NAME.into());
    }
    let targets = match &config.targets {
        Some(keys) => resolve_targets(keys, &covariates)?,
        None => (0..n_covariates).collect(),
    };
    let dpme = dpme_config(config);
    let (rows, fits, treatment_rule) = match config.family {
        FamilyKind::Linear | FamilyKind::Logistic => {
            let model = if config.family == FamilyKind::Linear {
                ModelSpec::linear()
            } else {
                ModelSpec::logistic()
            };
            let results = if config.joint {
                vec![run_dpme(&model, &dataset, &targets, &dpme)?]
            } else {
                run_dpme_marginal(&model, &dataset, &targets, &dpme)?
            };
            let fits: Vec<Diagnostics> = results.iter().map(|r| Diagnostics::from_result(r, &covariates)).collect();
            (linear_rows(&results, &covariates), fits, None)
        }
        FamilyKind::Itr => {
            let r = fit_itr_dpme(&dataset, &targets, config.seed, &itr_config(config))?;
            let init = |t: usize| -> f64 {
                r.halves.iter().map(|h| h.estimates[t].theta_init[0]).sum::<f64>() / r.halves.len() as f64
            };
            let rows = targets
                .iter()
                .enumerate()
                .map(|(t, &j)| CoordinateRow {
                    name: covariates[j].clone(),
                    theta_init: init(t),
                    theta_debiased: r.theta[t],
                    se: r.se[t],
                    p_value: r.p_values[t],
                })
                .collect();
            let fits = r
                .halves
                .iter()
                .flat_map(|h| h.estimates.iter().map(|e| Diagnostics::from_result(e, &covariates)))
                .collect();
            let named = |idx: &[usize]| idx.iter().map(|&j| covariates[j].clone()).collect();
            let summary = ItrSummary {
                value_estimate: r.value_estimate,
                halves: r
                    .halves
                    .iter()
                    .map(|h| HalfSummary {
                        screened_propensity: named(&h.screened_propensity),
                        screened_outcome: named(&h.screened_outcome),
                        bandwidth: h.bandwidth,
                        lambda: h.lambda,
                    })
                    .collect(),
            };
            (rows, fits, Some(summary))
        }
    };

    let z = normal_quantile(1.0 - config.alpha / 2.0);
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.cells(z)).collect();
    write_table(&config.output_file("csv"), &FIT_HEADER, &cells)?;
    write_json(
        &config.output_file("json"),
        &FitSidecar {
            config,
            n: dataset.n(),
            p: dataset.p(),
            covariates: &covariates,
            fits,
            treatment_rule,
        },
    )?;
    for r in &rows {
        log::info!(
            "{}: {:.6} -> {:.6} (se {:.6}, p {:.4})",
            r.name,
            r.theta_init,
            r.theta_debiased,
            r.se,
            r.p_value
        );
    }
    Ok(())
}

fn scenario(config: &RunConfig) -> CliResult<Scenario> {
    let mut s = Scenario::new(config.scenario.into(), config.n, config.p, config.reps, config.seed);
    if let Some(keys) = &config.targets {
        s.targets = keys
            .iter()
            .map(|k| match k {
                TargetKey::Index(i) => Ok(*i),
                TargetKey::Name(name) => name
                    .parse::<usize>()
                    .map_err(|_| CliError::input(format!("simulation target '{name}' must be an index"))),
            })
            .collect::<CliResult<_>>()?;
    }
    s.alpha_levels = if (config.alpha - 0.05).abs() < 1e-12 {
        vec![0.05, 0.10]
    } else {
        vec![config.alpha]
    };
    s.covariate_scale = config.covariate_scale.into();
    s.intercept = config.intercept;
    s.truth_mc_size = config.truth_mc;
    s.validate()?;
    Ok(s)
}

fn write_report(config: &RunConfig, report: &SimReport) -> CliResult<()> {
    write_file(&config.output_file("csv"), &report.to_csv()?)?;
    print!("{}", report.to_csv()?);
    Ok(())
}

/// Monte Carlo study of one built-in design.
pub fn cmd_simulate(config: &RunConfig) -> CliResult<()> {
    let scenario = scenario(config)?;
    if let Some(dir) = &config.truth_cache {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let sim = SimConfig {
        dpme: dpme_config(config),
        screen_k: config.screen_k,
        truth_cache_dir: config.truth_cache.clone(),
        ..SimConfig::default()
    };
    let report = run_scenario(&scenario, &sim)?;
    if report.unreliable {
        log::warn!("{} of {} replicates dropped; summaries are unreliable", report.dropped, scenario.reps);
    }
    write_file(&config.output_file("json"), &(report.to_json()? + "\n"))?;
    write_report(config, &report)
}

/// Re-aggregates the audit records of a simulation report.
pub fn cmd_report(config: &RunConfig) -> CliResult<()> {
    let input = config.input.as_deref().ok_or_else(|| CliError::input("an input file is required"))?;
    let text = std::fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
    let mut report: SimReport = serde_json::from_str(&text)
        .map_err(|e| CliError::input(format!("{}: not a simulation report: {e}", input.display())))?;
    report.scenario.validate()?;
    if report.records.iter().any(|r| r.error.is_none() && r.targets.len() != report.scenario.targets.len()) {
        return Err(CliError::input(format!(
            "{}: replicate records do not match the scenario targets",
            input.display()
        )));
    }
    let summaries = aggregate(&report.scenario, &report.records);
    if summaries != report.summaries {
        log::warn!("stored summaries differ from the re-aggregated records; using the records");
    }
    report.summaries = summaries;
    write_report(config, &report)
}

#[derive(Serialize)]
struct ItrSidecar<'a> {
    config: &'a RunConfig,
    n: usize,
    covariates: &'a [String],
    pruned: Vec<String>,
    seeds: Vec<u64>,
    failures: Vec<dpme_core::itr::SplitFailure>,
}

/// Treatment-rule coefficients over repeated splits, one row per covariate.
pub fn cmd_itr(config: &RunConfig) -> CliResult<()> {
    let Ingested { dataset, covariates } = load(config)?;
    if dataset.treatment().is_none() {
        return Err(CliError::input("treatment-rule estimation needs a treatment column"));
    }
    let keep = if dataset.p() > 1 {
        prune_correlated_columns(dataset.x(), config.prune_threshold)?
    } else {
        vec![0]
    };
    let pruned: Vec<String> = (0..covariates.len())
        .filter(|j| !keep.contains(j))
        .map(|j| covariates[j].clone())
        .collect();
    if !pruned.is_empty() {
        log::info!(
            "pruned {} covariate(s) correlated above {}: {}",
            pruned.len(),
            config.prune_threshold,
            pruned.join(", ")
        );
    }
    let data: Dataset = dataset.select_columns(&keep);
    let names: Vec<String> = keep.iter().map(|&j| covariates[j].clone()).collect();
    let targets: Vec<usize> = (0..names.len()).collect();
    let result = repeated_split_analysis(&data, &targets, config.repeats, config.seed, &itr_config(config))?;

    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| result.p_value[a].total_cmp(&result.p_value[b]));
    let rows: Vec<Vec<String>> = order
        .iter()
        .map(|&t| {
            vec![
                names[t].clone(),
                result.estimate[t].to_string(),
                result.se[t].to_string(),
                result.p_value[t].to_string(),
            ]
        })
        .collect();
    write_table(&config.output_file("csv"), &ITR_HEADER, &rows)?;
    write_json(
        &config.output_file("json"),
        &ItrSidecar {
            config,
            n: data.n(),
            covariates: &names,
            pruned,
            seeds: result.seeds,
            failures: result.failures,
        },
    )?;
    if let Some(&t) = order.first() {
        log::info!(
            "smallest p-value: {} ({:.4}, z = {:.3})",
            names[t],
            result.p_value[t],
            result.estimate[t] / result.se[t]
        );
    }
    Ok(())
}
