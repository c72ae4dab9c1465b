//! Data-generating processes and the Monte Carlo harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{run_dpme_marginal, DpmeConfig};
use crate::error::{Error, Result, Stage};
use crate::itr::{fit_itr_dpme, treatment_weights, ItrConfig};
use crate::model::{sigmoid, Dataset, ModelSpec};
use crate::stats::{median, sample_sd};

/// Generator for replicate `replicate` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

const BLOCK: usize = 4;
/// Standard deviation of `0.5 (U + U')` for independent uniforms.
const BLOCK_SD: f64 = 0.204_124_145_231_931_5;

/// `X_kj = 0.5 (w_kj + u_k)` with uniform `w`, `u` and blocks of four columns.
pub fn gen_blocked_covariates<R: Rng>(n: usize, p: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if p == 0 || p % BLOCK != 0 {
        return Err(Error::invalid(format!("p must be a positive multiple of 4, got {p}")));
    }
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for b in 0..p / BLOCK {
            let u: f64 = rng.gen();
            for j in b * BLOCK..(b + 1) * BLOCK {
                let w: f64 = rng.gen();
                x[(i, j)] = 0.5 * (w + u);
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateScale {
    /// Entries in `[0, 1]` with variance 1/24.
    Raw,
    /// Centred at the population mean and scaled to unit population variance.
    #[default]
    Standardized,
}

fn scaled_covariates<R: Rng>(n: usize, p: usize, scale: CovariateScale, rng: &mut R) -> Result<DMatrix<f64>> {
    let mut x = gen_blocked_covariates(n, p, rng)?;
    if scale == CovariateScale::Standardized {
        x.apply(|v| *v = (*v - 0.5) / BLOCK_SD);
    }
    Ok(x)
}

/// `(1, 1, 1, 1, 1, 0, ..., 0)`.
pub fn sparse_truth(p: usize) -> Vec<f64> {
    (0..p).map(|j| if j < 5 { 1.0 } else { 0.0 }).collect()
}

/// `Y = X beta0 + N(0, 1)`.
pub fn gen_linear<R: Rng>(n: usize, p: usize, scale: CovariateScale, rng: &mut R) -> Result<Dataset> {
    let x = scaled_covariates(n, p, scale, rng)?;
    let beta = sparse_truth(p);
    let y = (0..n)
        .map(|i| {
            let mean: f64 = (0..5.min(p)).map(|j| x[(i, j)] * beta[j]).sum();
            mean + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Dataset::new(x, y)
}

/// `P(Y = 1 | X) = 1 / (1 + exp(-X beta0))`.
pub fn gen_logistic<R: Rng>(n: usize, p: usize, scale: CovariateScale, rng: &mut R) -> Result<Dataset> {
    let x = scaled_covariates(n, p, scale, rng)?;
    let y = (0..n)
        .map(|i| {
            let eta: f64 = (0..5.min(p)).map(|j| x[(i, j)]).sum();
            let u: f64 = rng.gen();
            if u < sigmoid(eta) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Dataset::new(x, y)
}

const ITR_DELTA: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];
const ITR_SCALE: [f64; 4] = [-1.0, 1.0, -1.0, -1.0];
const ITR_PROPENSITY: [f64; 4] = [0.0, 0.0, 1.0, -1.0];

fn dot4(x: &[f64], b: &[f64; 4]) -> f64 {
    x.iter().zip(b).map(|(a, c)| a * c).sum()
}

/// Treatment-rule sample together with both potential outcomes.
#[derive(Debug, Clone)]
pub struct ItrSample {
    pub data: Dataset,
    pub y_pos: Vec<f64>,
    pub y_neg: Vec<f64>,
    /// `Delta(X)`; the treatment effect is `2 Delta`.
    pub delta: Vec<f64>,
    /// True `P(A = 1 | X)`.
    pub propensity: Vec<f64>,
}

struct ItrRow {
    x: Vec<f64>,
    a: f64,
    y: f64,
    y_pos: f64,
    y_neg: f64,
    delta: f64,
    pi: f64,
}

fn draw_itr_row<R: Rng>(p: usize, rng: &mut R) -> ItrRow {
    let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let head = &x[..4];
    let delta = dot4(head, &ITR_DELTA);
    let s = 0.4 * dot4(head, &ITR_SCALE);
    let pi = sigmoid(0.4 * dot4(head, &ITR_PROPENSITY));
    let eps: f64 = rng.sample(StandardNormal);
    let y_pos = delta + s * eps;
    let y_neg = -delta + s * eps;
    let a = if rng.gen::<f64>() < pi { 1.0 } else { -1.0 };
    let y = if a > 0.0 { y_pos } else { y_neg };
    ItrRow {
        x,
        a,
        y,
        y_pos,
        y_neg,
        delta,
        pi,
    }
}

/// Standard normal covariates, `Y(a) = a Delta(X) + S(X) eps`, logistic propensity.
pub fn gen_itr<R: Rng>(n: usize, p: usize, rng: &mut R) -> Result<ItrSample> {
    if p < 4 {
        return Err(Error::invalid("the treatment-rule design needs p >= 4"));
    }
    let rows: Vec<ItrRow> = (0..n).map(|_| draw_itr_row(p, rng)).collect();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i].x[j]);
    let data = Dataset::with_parts(
        x,
        rows.iter().map(|r| r.y).collect(),
        Some(rows.iter().map(|r| r.a).collect()),
        None,
    )?;
    Ok(ItrSample {
        data,
        y_pos: rows.iter().map(|r| r.y_pos).collect(),
        y_neg: rows.iter().map(|r| r.y_neg).collect(),
        delta: rows.iter().map(|r| r.delta).collect(),
        propensity: rows.iter().map(|r| r.pi).collect(),
    })
}

/// Population minimizer of the weighted logistic surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItrTruth {
    pub p: usize,
    pub mc_size: usize,
    pub seed: u64,
    /// Minimizer as estimated by the weighted logistic fit.
    pub raw: Vec<f64>,
    /// `raw / raw[2]`, the identified scale with the third coordinate at one.
    pub normalized: Vec<f64>,
}

const TRUTH_CHUNK: usize = 50_000;

/// Minimizes the surrogate loss with AIPW weights built from the true
/// propensity and outcome models, on `mc_size` simulated draws.
///
/// Draws are regenerated chunk by chunk on every Newton pass, so memory
/// stays at one chunk. With `cache_dir` the result is stored as JSON keyed
/// by `(p, mc_size, seed)` and reused.
pub fn true_beta_itr(p: usize, mc_size: usize, seed: u64, cache_dir: Option<&Path>) -> Result<ItrTruth> {
    if p < 4 || mc_size < 100 {
        return Err(Error::invalid("truth approximation needs p >= 4 and mc_size >= 100"));
    }
    let cache_file: Option<PathBuf> = cache_dir.map(|d| d.join(format!("itr_truth_p{p}_n{mc_size}_s{seed}.json")));
    if let Some(f) = &cache_file {
        if let Ok(text) = std::fs::read_to_string(f) {
            if let Ok(t) = serde_json::from_str::<ItrTruth>(&text) {
                if t.p == p && t.mc_size == mc_size && t.seed == seed {
                    return Ok(t);
                }
            }
        }
    }

    let chunks = mc_size.div_ceil(TRUTH_CHUNK);
    let mut beta = vec![0.0; p];
    let mut converged = false;
    for _ in 0..50 {
        let parts: Vec<(DMatrix<f64>, Vec<f64>)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let size = TRUTH_CHUNK.min(mc_size - c * TRUTH_CHUNK);
                let mut rng = replicate_rng(seed, c as u64);
                let mut xtwx = DMatrix::zeros(p, p);
                let mut grad = vec![0.0; p];
                let mut xs = DMatrix::zeros(size, p);
                let mut ws = vec![0.0; size];
                for i in 0..size {
                    let r = draw_itr_row(p, &mut rng);
                    let mu_pos = r.delta;
                    let mu_neg = -r.delta;
                    let yp = if r.a > 0.0 { (r.y - mu_pos) / r.pi + mu_pos } else { mu_pos };
                    let yn = if r.a < 0.0 { (r.y - mu_neg) / (1.0 - r.pi) + mu_neg } else { mu_neg };
                    let (op, on) = treatment_weights(yp, yn);
                    let eta: f64 = r.x.iter().zip(&beta).map(|(a, b)| a * b).sum();
                    let s = sigmoid(eta);
                    let score = op * (1.0 - s) - on * s;
                    for j in 0..p {
                        grad[j] += score * r.x[j];
                        xs[(i, j)] = r.x[j];
                    }
                    ws[i] = (op + on) * s * (1.0 - s);
                }
                let mut wx = xs.clone();
                for i in 0..size {
                    wx.row_mut(i).scale_mut(ws[i]);
                }
                xs.tr_mul_to(&wx, &mut xtwx);
                (xtwx, grad)
            })
            .collect();
        let mut hess = DMatrix::zeros(p, p);
        let mut grad = nalgebra::DVector::zeros(p);
        for (h, g) in parts {
            hess += h;
            grad += nalgebra::DVector::from_vec(g);
        }
        let step = hess.lu().solve(&grad).ok_or(Error::Singular {
            stage: Stage::Simulation,
            condition: f64::INFINITY,
        })?;
        for j in 0..p {
            beta[j] += step[j];
        }
        if step.amax() < 1e-10 * (1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs()))) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            stage: Stage::Simulation,
            theta: beta,
            iterations: 50,
        });
    }
    if beta[2].abs() < 1e-3 {
        return Err(Error::Numerical {
            stage: Stage::Simulation,
            message: "third coordinate of the surrogate minimizer is numerically zero".into(),
        });
    }
    let normalized = beta.iter().map(|b| b / beta[2]).collect();
    let truth = ItrTruth {
        p,
        mc_size,
        seed,
        raw: beta,
        normalized,
    };
    if let Some(f) = &cache_file {
        if let Some(dir) = f.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(f, serde_json::to_string_pretty(&truth)?)?;
    }
    Ok(truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Linear,
    Logistic,
    Itr,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioKind::Linear => "linear",
            ScenarioKind::Logistic => "logistic",
            ScenarioKind::Itr => "itr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub targets: Vec<usize>,
    pub alpha_levels: Vec<f64>,
    pub covariate_scale: CovariateScale,
    /// Appends a constant column (last) to the simulated design.
    pub intercept: bool,
    /// Draws used to approximate the treatment-rule truth.
    pub truth_mc_size: usize,
    /// Seed of the truth approximation.
    pub truth_seed: u64,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, n: usize, p: usize, reps: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            p,
            reps,
            seed,
            targets: vec![0, 5],
            alpha_levels: vec![0.05, 0.10],
            covariate_scale: CovariateScale::Standardized,
            intercept: false,
            truth_mc_size: 1_000_000,
            truth_seed: 20_240_601,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::invalid("reps must be at least 1"));
        }
        if self.kind != ScenarioKind::Itr && self.p % BLOCK != 0 {
            return Err(Error::invalid("p must be divisible by 4 for the block designs"));
        }
        if self.kind == ScenarioKind::Itr && self.p < 4 {
            return Err(Error::invalid("the treatment-rule design needs p >= 4"));
        }
        if self.n < 4 {
            return Err(Error::invalid("n must be at least 4"));
        }
        if self.targets.is_empty() || self.targets.iter().any(|&t| t >= self.p) {
            return Err(Error::invalid("targets must be nonempty and within 0..p"));
        }
        if self.alpha_levels.is_empty() || self.alpha_levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("alpha levels must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dpme: DpmeConfig,
    pub screen_k: usize,
    pub propensity_clip: (f64, f64),
    /// Where the treatment-rule truth is cached.
    pub truth_cache_dir: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let itr = ItrConfig::default();
        Self {
            dpme: itr.dpme,
            screen_k: itr.screen_k,
            propensity_clip: itr.propensity_clip,
            truth_cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub target: usize,
    pub truth: f64,
    pub initial: f64,
    pub estimate: f64,
    pub se: f64,
    /// Whether each interval (in `alpha_levels` order) covers the truth.
    pub covered: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub lambda: Option<f64>,
    pub targets: Vec<TargetRecord>,
    /// Failure message for dropped replicates.
    pub error: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: usize,
    pub truth: f64,
    pub median_bias: f64,
    /// Absent with fewer than two completed replicates.
    pub sd: Option<f64>,
    pub median_se: f64,
    /// Coverage per alpha level, in `alpha_levels` order.
    pub coverage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: Scenario,
    pub completed: usize,
    pub dropped: usize,
    /// More than 5% of replicates were dropped.
    pub unreliable: bool,
    pub summaries: Vec<TargetSummary>,
    pub records: Vec<ReplicateRecord>,
    #[serde(skip)]
    pub mean_seconds: f64,
}

fn replicate_seed(seed: u64, replicate: usize) -> u64 {
    seed ^ (replicate as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run_replicate(scenario: &Scenario, config: &SimConfig, truth: &[f64], r: usize) -> ReplicateRecord {
    let start = Instant::now();
    let outcome = replicate_estimates(scenario, config, r);
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((lambda, rows)) => ReplicateRecord {
            replicate: r,
            lambda: Some(lambda),
            targets: rows
                .into_iter()
                .zip(&scenario.targets)
                .map(|((initial, estimate, se, bounds), &target)| {
                    let t = truth[target];
                    TargetRecord {
                        target,
                        truth: t,
                        initial,
                        estimate,
                        se,
                        covered: bounds.iter().map(|(lo, hi)| *lo <= t && t <= *hi).collect(),
                    }
                })
                .collect(),
            error: None,
            seconds,
        },
        Err(e) => ReplicateRecord {
            replicate: r,
            lambda: None,
            targets: Vec::new(),
            error: Some(e.to_string()),
            seconds,
        },
    }
}

type Estimate = (f64, f64, f64, Vec<(f64, f64)>);

fn replicate_estimates(scenario: &Scenario, config: &SimConfig, r: usize) -> Result<(f64, Vec<Estimate>)> {
    let mut rng = replicate_rng(scenario.seed, r as u64);
    let mut dpme = config.dpme.clone();
    dpme.alpha_levels = scenario.alpha_levels.clone();
    dpme.solver.seed = replicate_seed(scenario.seed, r);
    let with_intercept = |d: Dataset| if scenario.intercept { d.with_intercept_column() } else { d };
    match scenario.kind {
        ScenarioKind::Linear | ScenarioKind::Logistic => {
            let (data, model) = if scenario.kind == ScenarioKind::Linear {
                (gen_linear(scenario.n, scenario.p, scenario.covariate_scale, &mut rng)?, ModelSpec::linear())
            } else {
                (gen_logistic(scenario.n, scenario.p, scenario.covariate_scale, &mut rng)?, ModelSpec::logistic())
            };
            let data = with_intercept(data);
            let results = run_dpme_marginal(&model, &data, &scenario.targets, &dpme)?;
            let lambda = results[0].lambda;
            let rows = results
                .into_iter()
                .map(|d| {
                    let bounds = d.intervals.iter().map(|c| (c.low[0], c.high[0])).collect();
                    (d.theta_init[0], d.theta_debiased[0], d.se[0], bounds)
                })
                .collect();
            Ok((lambda, rows))
        }
        ScenarioKind::Itr => {
            let sample = gen_itr(scenario.n, scenario.p, &mut rng)?;
            let data = with_intercept(sample.data);
            let cfg = ItrConfig {
                dpme,
                screen_k: config.screen_k,
                propensity_clip: config.propensity_clip,
            };
            let res = fit_itr_dpme(&data, &scenario.targets, replicate_seed(scenario.seed, r), &cfg)?;
            let lambda = 0.5 * (res.halves[0].lambda + res.halves[1].lambda);
            let rows = (0..scenario.targets.len())
                .map(|t| {
                    let init = 0.5
                        * (res.halves[0].estimates[t].theta_init[0] + res.halves[1].estimates[t].theta_init[0]);
                    let bounds = res.intervals.iter().map(|c| (c.low[t], c.high[t])).collect();
                    (init, res.theta[t], res.se[t], bounds)
                })
                .collect();
            Ok((lambda, rows))
        }
    }
}

/// True coefficient vector the scenario's estimates are compared against.
pub fn scenario_truth(scenario: &Scenario, config: &SimConfig) -> Result<Vec<f64>> {
    Ok(match scenario.kind {
        ScenarioKind::Linear | ScenarioKind::Logistic => sparse_truth(scenario.p),
        ScenarioKind::Itr => {
            true_beta_itr(
                scenario.p,
                scenario.truth_mc_size,
                scenario.truth_seed,
                config.truth_cache_dir.as_deref(),
            )?
            .normalized
        }
    })
}

/// Per-target aggregates over the completed replicates.
pub fn aggregate(scenario: &Scenario, records: &[ReplicateRecord]) -> Vec<TargetSummary> {
    let done: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    scenario
        .targets
        .iter()
        .enumerate()
        .map(|(t, &target)| {
            let rows: Vec<&TargetRecord> = done.iter().map(|r| &r.targets[t]).collect();
            let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
            let bias: Vec<f64> = rows.iter().map(|r| r.estimate - r.truth).collect();
            let se: Vec<f64> = rows.iter().map(|r| r.se).collect();
            let m = rows.len().max(1) as f64;
            TargetSummary {
                target,
                truth: rows.first().map_or(f64::NAN, |r| r.truth),
                median_bias: median(&bias),
                sd: sample_sd(&est),
                median_se: median(&se),
                coverage: (0..scenario.alpha_levels.len())
                    .map(|a| rows.iter().filter(|r| r.covered[a]).count() as f64 / m)
                    .collect(),
            }
        })
        .collect()
}

/// Runs every replicate (in parallel) and aggregates in replicate order.
pub fn run_scenario(scenario: &Scenario, config: &SimConfig) -> Result<SimReport> {
    scenario.validate()?;
    let truth = scenario_truth(scenario, config)?;
    let records: Vec<ReplicateRecord> = (0..scenario.reps)
        .into_par_iter()
        .map(|r| run_replicate(scenario, config, &truth, r))
        .collect();
    let dropped = records.iter().filter(|r| r.error.is_some()).count();
    for r in records.iter().filter(|r| r.error.is_some()) {
        log::warn!("replicate {} dropped: {}", r.replicate, r.error.as_deref().unwrap_or(""));
    }
    let completed = records.len() - dropped;
    if completed == 0 {
        return Err(Error::Numerical {
            stage: Stage::Simulation,
            message: format!(
                "all {} replicates failed; first error: {}",
                records.len(),
                records[0].error.as_deref().unwrap_or("")
            ),
        });
    }
    let mean_seconds = records.iter().map(|r| r.seconds).sum::<f64>() / records.len() as f64;
    log::info!(
        "{} n={} p={}: {completed} replicates, {dropped} dropped, {mean_seconds:.3}s per replicate",
        scenario.kind,
        scenario.n,
        scenario.p
    );
    Ok(SimReport {
        summaries: aggregate(scenario, &records),
        unreliable: dropped as f64 > 0.05 * records.len() as f64,
        scenario: scenario.clone(),
        completed,
        dropped,
        records,
        mean_seconds,
    })
}

/// Column label for an interval level, e.g. `cp95` for alpha 0.05.
pub fn coverage_label(alpha: f64) -> String {
    let pct = (100.0 * (1.0 - alpha) * 1e6).round() / 1e6;
    format!("cp{pct}")
}

impl SimReport {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["scenario", "n", "p", "reps", "target", "truth", "bias", "sd", "se"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.scenario.alpha_levels.iter().map(|&a| coverage_label(a)));
        h.extend(["completed", "dropped"].iter().map(|s| s.to_string()));
        h
    }

    /// One row per target, in Table order: bias, SD, SE, then coverages.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.csv_header())?;
        for s in &self.summaries {
            let mut row = vec![
                self.scenario.kind.to_string(),
                self.scenario.n.to_string(),
                self.scenario.p.to_string(),
                self.scenario.reps.to_string(),
                s.target.to_string(),
                s.truth.to_string(),
                s.median_bias.to_string(),
                s.sd.map_or_else(String::new, |v| v.to_string()),
                s.median_se.to_string(),
            ];
            row.extend(s.coverage.iter().map(|c| c.to_string()));
            row.push(self.completed.to_string());
            row.push(self.dropped.to_string());
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn summary(&self, target: usize) -> Option<&TargetSummary> {
        self.summaries.iter().find(|s| s.target == target)
    }

    /// Coverage of `target` at `alpha`, if both were part of the scenario.
    pub fn coverage(&self, target: usize, alpha: f64) -> Option<f64> {
        let a = self.scenario.alpha_levels.iter().position(|x| (x - alpha).abs() < 1e-12)?;
        self.summary(target).map(|s| s.coverage[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariates_require_blocks_of_four() {
        let mut rng = replicate_rng(1, 0);
        assert!(gen_blocked_covariates(10, 6, &mut rng).is_err());
        let x = gen_blocked_covariates(50, 8, &mut rng).unwrap();
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn block_sd_constant() {
        assert!((BLOCK_SD - (1.0f64 / 24.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn substreams_differ_and_repeat() {
        let a: f64 = replicate_rng(5, 0).gen();
        let b: f64 = replicate_rng(5, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, replicate_rng(5, 0).gen::<f64>());
    }

    #[test]
    fn coverage_labels() {
        assert_eq!(coverage_label(0.05), "cp95");
        assert_eq!(coverage_label(0.10), "cp90");
        assert_eq!(coverage_label(0.2), "cp80");
    }

    #[test]
    fn scenario_validation() {
        assert!(Scenario::new(ScenarioKind::Linear, 100, 10, 1, 0).validate().is_err());
        let mut s = Scenario::new(ScenarioKind::Linear, 100, 12, 0, 0);
        assert!(s.validate().is_err());
        s.reps = 1;
        assert!(s.validate().is_ok());
    }
}
