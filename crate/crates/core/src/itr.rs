//! Individualized treatment rules: kernel nuisances on one half of the
//! sample, AIPW pseudo-outcomes and a weighted logistic-Lasso on the other,
//! debiasing per coordinate, and cross-fitting.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{debias_from_fit, initial_fit, intervals, p_values, ConfidenceInterval, DebiasResult, DpmeConfig};
use crate::error::{Error, Result, Stage};
use crate::model::{Dataset, ModelSpec};
use crate::stats::median;

/// Split into `(train, infer)` of sizes `ceil(n/2)` and `floor(n/2)`, each sorted.
pub fn split_sample(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 4 {
        return Err(Error::invalid("sample splitting needs n >= 4"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = n.div_ceil(2);
    let mut train = perm[..cut].to_vec();
    let mut infer = perm[cut..].to_vec();
    train.sort_unstable();
    infer.sort_unstable();
    Ok((train, infer))
}

fn distance_row_means(u: &[f64]) -> (Vec<f64>, f64) {
    let n = u.len();
    let rows: Vec<f64> = u
        .iter()
        .map(|&ui| u.iter().map(|&uj| (ui - uj).abs()).sum::<f64>() / n as f64)
        .collect();
    let grand = rows.iter().sum::<f64>() / n as f64;
    (rows, grand)
}

/// `(1/n^2) sum_ij A_ij B_ij` for the double-centred distance matrices,
/// without materializing them.
fn dcov2(u: &[f64], v: &[f64], ru: &(Vec<f64>, f64), rv: &(Vec<f64>, f64)) -> f64 {
    let n = u.len() as f64;
    let mut cross = 0.0;
    for i in 0..u.len() {
        let (ui, vi) = (u[i], v[i]);
        let mut s = 0.0;
        for j in 0..u.len() {
            s += (ui - u[j]).abs() * (vi - v[j]).abs();
        }
        cross += s;
    }
    let rows: f64 = ru.0.iter().zip(&rv.0).map(|(a, b)| a * b).sum();
    (cross - 2.0 * n * rows + n * n * ru.1 * rv.1) / (n * n)
}

/// Sample distance correlation in `[0, 1]`; zero when either input is constant.
pub fn distance_correlation(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(Error::invalid("distance correlation needs two equal-length samples of size >= 2"));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::invalid("distance correlation inputs must be finite"));
    }
    let ru = distance_row_means(u);
    let rv = distance_row_means(v);
    let vu = dcov2(u, u, &ru, &ru);
    let vv = dcov2(v, v, &rv, &rv);
    if vu <= 0.0 || vv <= 0.0 {
        return Ok(0.0);
    }
    let r2 = dcov2(u, v, &ru, &rv) / (vu * vv).sqrt();
    Ok(r2.clamp(0.0, 1.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenTarget {
    /// Dependence on the treatment.
    Propensity,
    /// Dependence on the response, pooled over arms.
    Outcome,
}

/// The `k` columns most dependent on the target, strongest first; ties go to the lower index.
pub fn screen_covariates(data: &Dataset, target: ScreenTarget, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > data.p() {
        return Err(Error::invalid(format!("screening size {k} must be in 1..={}", data.p())));
    }
    let t: &[f64] = match target {
        ScreenTarget::Propensity => data
            .treatment()
            .ok_or_else(|| Error::invalid("propensity screening needs a treatment column"))?,
        ScreenTarget::Outcome => data.y(),
    };
    let scores: Vec<f64> = (0..data.p())
        .into_par_iter()
        .map(|j| distance_correlation(data.column(j), t))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..data.p()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Nadaraya-Watson estimate with an unnormalized product Gaussian kernel.
///
/// Falls back to the training mean when the total kernel mass is below 1e-12.
pub fn kernel_regress(train_x: &DMatrix<f64>, train_y: &[f64], bandwidth: f64, query: &[f64]) -> Result<f64> {
    let (m, k) = train_x.shape();
    if m == 0 || train_y.len() != m || query.len() != k {
        return Err(Error::invalid("kernel regression dimension mismatch"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut mass = 0.0;
    let mut acc = 0.0;
    for i in 0..m {
        let mut d2 = 0.0;
        for (c, q) in query.iter().enumerate() {
            let d = train_x[(i, c)] - q;
            d2 += d * d;
        }
        let w = (-d2 * scale).exp();
        mass += w;
        acc += w * train_y[i];
    }
    if mass < 1e-12 {
        return Ok(train_y.iter().sum::<f64>() / m as f64);
    }
    Ok(acc / mass)
}

/// `(1.5 m)^(-1/5)` for a training sample of size `m`.
pub fn default_bandwidth(m: usize) -> f64 {
    (1.5 * m as f64).powf(-0.2)
}

/// Propensity and arm-wise outcome regressions fitted on a training half.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub screened_indices_pi: Vec<usize>,
    pub screened_indices_mu: Vec<usize>,
    pub bandwidth: f64,
    pub clip: (f64, f64),
    pi_x: DMatrix<f64>,
    pi_y: Vec<f64>,
    mu_pos_x: DMatrix<f64>,
    mu_pos_y: Vec<f64>,
    mu_neg_x: DMatrix<f64>,
    mu_neg_y: Vec<f64>,
}

fn subset(data: &Dataset, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, c| data.x()[(rows[i], cols[c])])
}

fn project(row: &[f64], cols: &[usize]) -> Vec<f64> {
    cols.iter().map(|&c| row[c]).collect()
}

impl NuisanceFit {
    pub fn fit(train: &Dataset, k: usize, clip: (f64, f64)) -> Result<Self> {
        let a = train
            .treatment()
            .ok_or_else(|| Error::invalid("nuisance fitting needs a treatment column"))?;
        if !(clip.0 > 0.0 && clip.0 < clip.1 && clip.1 < 1.0) {
            return Err(Error::invalid("propensity clip bounds must satisfy 0 < lo < hi < 1"));
        }
        let k = k.min(train.p());
        let screened_indices_pi = screen_covariates(train, ScreenTarget::Propensity, k)?;
        let screened_indices_mu = screen_covariates(train, ScreenTarget::Outcome, k)?;
        let all: Vec<usize> = (0..train.n()).collect();
        let pos: Vec<usize> = all.iter().copied().filter(|&i| a[i] > 0.0).collect();
        let neg: Vec<usize> = all.iter().copied().filter(|&i| a[i] < 0.0).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Numerical {
                stage: Stage::Nuisance,
                message: "training half has only one treatment arm".into(),
            });
        }
        Ok(Self {
            bandwidth: default_bandwidth(train.n()),
            clip,
            pi_x: subset(train, &all, &screened_indices_pi),
            pi_y: a.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
            mu_pos_x: subset(train, &pos, &screened_indices_mu),
            mu_pos_y: pos.iter().map(|&i| train.y()[i]).collect(),
            mu_neg_x: subset(train, &neg, &screened_indices_mu),
            mu_neg_y: neg.iter().map(|&i| train.y()[i]).collect(),
            screened_indices_pi,
            screened_indices_mu,
        })
    }

    /// Unclipped kernel estimate of `P(A = 1 | x)`.
    pub fn propensity_raw(&self, row: &[f64]) -> Result<f64> {
        kernel_regress(&self.pi_x, &self.pi_y, self.bandwidth, &project(row, &self.screened_indices_pi))
    }

    /// `P(A = 1 | x)`, clipped.
    pub fn propensity(&self, row: &[f64]) -> Result<f64> {
        Ok(self.propensity_raw(row)?.clamp(self.clip.0, self.clip.1))
    }

    /// `E(Y | x, A = arm)`.
    pub fn outcome(&self, arm: f64, row: &[f64]) -> Result<f64> {
        let q = project(row, &self.screened_indices_mu);
        if arm > 0.0 {
            kernel_regress(&self.mu_pos_x, &self.mu_pos_y, self.bandwidth, &q)
        } else {
            kernel_regress(&self.mu_neg_x, &self.mu_neg_y, self.bandwidth, &q)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcomes {
    pub y_hat_pos: Vec<f64>,
    pub y_hat_neg: Vec<f64>,
    pub omega_pos: Vec<f64>,
    pub omega_neg: Vec<f64>,
}

/// `Omega+ = Y(1)_+ + Y(-1)_-` and `Omega- = Y(1)_- + Y(-1)_+`.
pub fn treatment_weights(y_pos: f64, y_neg: f64) -> (f64, f64) {
    (
        y_pos.max(0.0) + (-y_neg).max(0.0),
        (-y_pos).max(0.0) + y_neg.max(0.0),
    )
}

/// AIPW potential outcomes from nuisance predictions.
///
/// `pi_pos` is `P(A = 1 | X)`; the other arm uses `1 - pi_pos`.
pub fn pseudo_outcomes_from_predictions(
    a: &[f64],
    y: &[f64],
    pi_pos: &[f64],
    mu_pos: &[f64],
    mu_neg: &[f64],
) -> Result<PseudoOutcomes> {
    let n = a.len();
    if [y.len(), pi_pos.len(), mu_pos.len(), mu_neg.len()].iter().any(|&l| l != n) {
        return Err(Error::invalid("pseudo-outcome inputs differ in length"));
    }
    let mut out = PseudoOutcomes {
        y_hat_pos: Vec::with_capacity(n),
        y_hat_neg: Vec::with_capacity(n),
        omega_pos: Vec::with_capacity(n),
        omega_neg: Vec::with_capacity(n),
    };
    for i in 0..n {
        let pos = if a[i] > 0.0 {
            (y[i] - mu_pos[i]) / pi_pos[i] + mu_pos[i]
        } else {
            mu_pos[i]
        };
        let neg = if a[i] < 0.0 {
            (y[i] - mu_neg[i]) / (1.0 - pi_pos[i]) + mu_neg[i]
        } else {
            mu_neg[i]
        };
        let (wp, wn) = treatment_weights(pos, neg);
        out.y_hat_pos.push(pos);
        out.y_hat_neg.push(neg);
        out.omega_pos.push(wp);
        out.omega_neg.push(wn);
    }
    Ok(out)
}

/// Pseudo-outcomes on an inference half from nuisances fitted elsewhere.
pub fn aipw_pseudo_outcomes(infer: &Dataset, nuisance: &NuisanceFit) -> Result<PseudoOutcomes> {
    let a = infer
        .treatment()
        .ok_or_else(|| Error::invalid("pseudo-outcomes need a treatment column"))?;
    let mut pi = Vec::with_capacity(infer.n());
    let mut mp = Vec::with_capacity(infer.n());
    let mut mn = Vec::with_capacity(infer.n());
    let mut clipped = 0;
    for i in 0..infer.n() {
        let row = infer.row(i);
        let raw = nuisance.propensity_raw(&row)?;
        let c = raw.clamp(nuisance.clip.0, nuisance.clip.1);
        if c != raw {
            clipped += 1;
        }
        pi.push(c);
        mp.push(nuisance.outcome(1.0, &row)?);
        mn.push(nuisance.outcome(-1.0, &row)?);
    }
    if clipped > 0 {
        log::debug!("propensity clipped for {clipped} of {} observations", infer.n());
    }
    pseudo_outcomes_from_predictions(a, infer.y(), &pi, &mp, &mn)
}

/// `sign(x^T beta)` with zero mapped to +1.
pub fn recommend(data: &Dataset, beta: &[f64]) -> Vec<f64> {
    data.linear_predictor(beta)
        .into_iter()
        .map(|s| if s >= 0.0 { 1.0 } else { -1.0 })
        .collect()
}

/// Plug-in value of the rule `sign(x^T beta)`.
pub fn estimate_value(infer: &Dataset, pseudo: &PseudoOutcomes, beta: &[f64]) -> Result<f64> {
    if beta.len() != infer.p() || pseudo.y_hat_pos.len() != infer.n() {
        return Err(Error::invalid("value estimate dimension mismatch"));
    }
    let d = recommend(infer, beta);
    let total: f64 = d
        .iter()
        .enumerate()
        .map(|(i, &di)| if di > 0.0 { pseudo.y_hat_pos[i] } else { pseudo.y_hat_neg[i] })
        .sum();
    Ok(total / infer.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItrConfig {
    pub dpme: DpmeConfig,
    /// Covariates kept by each screening step.
    pub screen_k: usize,
    pub propensity_clip: (f64, f64),
}

impl Default for ItrConfig {
    fn default() -> Self {
        Self {
            dpme: DpmeConfig::default(),
            screen_k: 4,
            propensity_clip: (0.05, 0.95),
        }
    }
}

/// One direction of the cross-fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfFit {
    pub train: Vec<usize>,
    pub infer: Vec<usize>,
    pub screened_propensity: Vec<usize>,
    pub screened_outcome: Vec<usize>,
    pub bandwidth: f64,
    pub lambda: f64,
    pub beta_init: Vec<f64>,
    /// Single-coordinate debiasing results, one per target.
    pub estimates: Vec<DebiasResult>,
    #[serde(skip)]
    pub pseudo: Option<PseudoOutcomes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItrResult {
    pub targets: Vec<usize>,
    /// Cross-fit average of the debiased targets.
    pub theta: Vec<f64>,
    pub se: Vec<f64>,
    pub intervals: Vec<ConfidenceInterval>,
    pub p_values: Vec<f64>,
    /// Averaged initial fit with the targets replaced by `theta`.
    pub beta: Vec<f64>,
    pub recommendations: Vec<f64>,
    pub value_estimate: f64,
    pub halves: Vec<HalfFit>,
}

fn fit_half(
    data: &Dataset,
    train_rows: &[usize],
    infer_rows: &[usize],
    targets: &[usize],
    config: &ItrConfig,
) -> Result<HalfFit> {
    let train = data.select_rows(train_rows);
    let infer = data.select_rows(infer_rows);
    let nuisance = NuisanceFit::fit(&train, config.screen_k, config.propensity_clip)?;
    let pseudo = aipw_pseudo_outcomes(&infer, &nuisance)?;
    let model = ModelSpec::weighted_logistic(pseudo.omega_pos.clone(), pseudo.omega_neg.clone())?;
    let initial = initial_fit(&model, &infer, &config.dpme)?;
    let estimates = targets
        .iter()
        .map(|&j| {
            let plan = config.dpme.plan(infer.n(), vec![j])?;
            debias_from_fit(&model, &infer, &initial, &plan, &config.dpme).map_err(|e| e.context(format!("coordinate {j}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HalfFit {
        train: train_rows.to_vec(),
        infer: infer_rows.to_vec(),
        screened_propensity: nuisance.screened_indices_pi,
        screened_outcome: nuisance.screened_indices_mu,
        bandwidth: nuisance.bandwidth,
        lambda: initial.lambda,
        beta_init: initial.beta,
        estimates,
        pseudo: Some(pseudo),
    })
}

fn check_itr_inputs(data: &Dataset, targets: &[usize]) -> Result<()> {
    if data.treatment().is_none() {
        return Err(Error::invalid("treatment-rule estimation needs a treatment column"));
    }
    if targets.is_empty() || targets.iter().any(|&j| j >= data.p()) {
        return Err(Error::invalid("target coordinates must be nonempty and within 0..p"));
    }
    Ok(())
}

/// Cross-fitted estimation given an explicit split. Swapping the two index
/// sets gives the same result.
pub fn fit_itr_dpme_with_split(
    data: &Dataset,
    targets: &[usize],
    split: (&[usize], &[usize]),
    config: &ItrConfig,
) -> Result<ItrResult> {
    check_itr_inputs(data, targets)?;
    let (a, b) = split;
    // Canonical order so that swapping the halves gives an identical result.
    let (first, second) = if b.first() < a.first() { (b, a) } else { (a, b) };
    let jobs = [(second, first, "half 1"), (first, second, "half 2")];
    let halves: Vec<HalfFit> = jobs
        .par_iter()
        .map(|(train, infer, label)| fit_half(data, train, infer, targets, config).map_err(|e| e.context(*label)))
        .collect::<Result<_>>()?;

    let q = targets.len();
    let theta: Vec<f64> = (0..q)
        .map(|t| (halves[0].estimates[t].theta_debiased[0] + halves[1].estimates[t].theta_debiased[0]) / 2.0)
        .collect();
    let se: Vec<f64> = (0..q)
        .map(|t| ((halves[0].estimates[t].cov[0][0] + halves[1].estimates[t].cov[0][0]) / 4.0).sqrt())
        .collect();
    let mut beta: Vec<f64> = halves[0]
        .beta_init
        .iter()
        .zip(&halves[1].beta_init)
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    for (t, &j) in targets.iter().enumerate() {
        beta[j] = theta[t];
    }
    let mut value = 0.0;
    for h in &halves {
        let infer = data.select_rows(&h.infer);
        let pseudo = h.pseudo.as_ref().expect("pseudo-outcomes are kept on fresh fits");
        value += estimate_value(&infer, pseudo, &beta)?;
    }
    Ok(ItrResult {
        targets: targets.to_vec(),
        intervals: intervals(&theta, &se, &config.dpme.alpha_levels),
        p_values: p_values(&theta, &se),
        recommendations: recommend(data, &beta),
        value_estimate: value / 2.0,
        theta,
        se,
        beta,
        halves,
    })
}

/// Split with `seed`, cross-fit, and average the two halves.
pub fn fit_itr_dpme(data: &Dataset, targets: &[usize], seed: u64, config: &ItrConfig) -> Result<ItrResult> {
    check_itr_inputs(data, targets)?;
    let (train, infer) = split_sample(data.n(), seed)?;
    fit_itr_dpme_with_split(data, targets, (&train, &infer), config)
}

/// `L / sum(1 / p_l)`, clipped to `(0, 1]`.
pub fn harmonic_mean_pvalue(p_values: &[f64]) -> Result<f64> {
    if p_values.is_empty() {
        return Err(Error::invalid("harmonic mean needs at least one p-value"));
    }
    if p_values.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::invalid("p-values must lie in (0, 1]"));
    }
    let s: f64 = p_values.iter().map(|p| 1.0 / p).sum();
    Ok((p_values.len() as f64 / s).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedSplitResult {
    pub targets: Vec<usize>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub p_value: Vec<f64>,
    pub seeds: Vec<u64>,
    pub failures: Vec<SplitFailure>,
}

/// Repeats the cross-fitted fit over `repeats` consecutive seeds and reports
/// per-coordinate medians and harmonic-mean p-values.
pub fn repeated_split_analysis(
    data: &Dataset,
    targets: &[usize],
    repeats: usize,
    base_seed: u64,
    config: &ItrConfig,
) -> Result<RepeatedSplitResult> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    check_itr_inputs(data, targets)?;
    let runs: Vec<(u64, Result<ItrResult>)> = (0..repeats as u64)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed.wrapping_add(r);
            (seed, fit_itr_dpme(data, targets, seed, config))
        })
        .collect();
    let mut ok = Vec::new();
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for (seed, run) in runs {
        match run {
            Ok(r) => {
                seeds.push(seed);
                ok.push(r);
            }
            Err(e) => {
                if e.is_input_error() {
                    return Err(e);
                }
                log::warn!("split seed {seed} failed: {e}");
                failures.push(SplitFailure {
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }
    if ok.len() < repeats.div_ceil(2) {
        return Err(Error::Numerical {
            stage: Stage::Nuisance,
            message: format!("only {} of {repeats} repeated splits succeeded", ok.len()),
        });
    }
    let q = targets.len();
    let col = |f: &dyn Fn(&ItrResult) -> f64| -> Vec<f64> { ok.iter().map(f).collect() };
    let mut estimate = Vec::with_capacity(q);
    let mut se = Vec::with_capacity(q);
    let mut p_value = Vec::with_capacity(q);
    for t in 0..q {
        estimate.push(median(&col(&|r| r.theta[t])));
        se.push(median(&col(&|r| r.se[t])));
        let ps: Vec<f64> = col(&|r| r.p_values[t].max(f64::MIN_POSITIVE));
        p_value.push(harmonic_mean_pvalue(&ps)?);
    }
    Ok(RepeatedSplitResult {
        targets: targets.to_vec(),
        estimate,
        se,
        p_value,
        seeds,
        failures,
    })
}

/// Greedy scan in column order keeping columns whose absolute Pearson
/// correlation with every kept column is at most `threshold`.
pub fn prune_correlated_columns(x: &DMatrix<f64>, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("pruning threshold must lie in (0, 1)"));
    }
    let n = x.nrows() as f64;
    let centred: Vec<(Vec<f64>, f64)> = (0..x.ncols())
        .map(|j| {
            let c = x.column(j);
            let m = c.sum() / n;
            let v: Vec<f64> = c.iter().map(|a| a - m).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            (v, norm)
        })
        .collect();
    let corr = |a: usize, b: usize| -> f64 {
        let (va, na) = &centred[a];
        let (vb, nb) = &centred[b];
        if *na == 0.0 || *nb == 0.0 {
            return 0.0;
        }
        va.iter().zip(vb).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
    };
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        if kept.iter().all(|&k| corr(k, j).abs() <= threshold) {
            kept.push(j);
        }
    }
    Ok(kept)
}
