//! Profile evaluation, finite differences, the one-step update and the
//! sandwich variance.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::model::{m_values, Dataset, FitResult, ModelSpec, PinSet};
use crate::solvers::{cv_select_lambda, fit_penalized, SolverConfig};
use crate::stats::{normal_quantile, two_sided_p};

/// Largest condition number accepted before the ridge fallback kicks in.
pub const MAX_CONDITION: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-8;

/// Finite-difference steps and the coordinates being debiased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub h1: f64,
    pub h2: f64,
    pub target_indices: Vec<usize>,
}

impl PerturbationPlan {
    pub fn new(h1: f64, h2: f64, target_indices: Vec<usize>) -> Result<Self> {
        if !(h1 > 0.0 && h1.is_finite() && h2 > 0.0 && h2.is_finite()) {
            return Err(Error::invalid("perturbation steps must be positive and finite"));
        }
        if target_indices.is_empty() {
            return Err(Error::invalid("at least one target coordinate is required"));
        }
        let mut sorted = target_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != target_indices.len() {
            return Err(Error::invalid("target coordinates must be distinct"));
        }
        Ok(Self {
            h1,
            h2,
            target_indices,
        })
    }

    /// `h1 = h2 = 0.75 n^-0.26`.
    pub fn default_for(n: usize, target_indices: Vec<usize>) -> Result<Self> {
        let h = default_step(n);
        Self::new(h, h, target_indices)
    }

    pub fn q(&self) -> usize {
        self.target_indices.len()
    }
}

pub fn default_step(n: usize) -> f64 {
    0.75 * (n as f64).powf(-0.26)
}

/// `theta - h e_j`, the only way grid points are formed so cache keys agree.
pub fn shifted(theta: &[f64], j: usize, h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    t[j] -= h;
    t
}

fn key(theta: &[f64]) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

/// Memoized constrained fits along the target coordinates.
///
/// Every fit warm-starts from the same vector, so a result does not depend
/// on the order in which grid points are visited.
pub struct ProfileEvaluator<'a> {
    model: &'a ModelSpec,
    data: &'a Dataset,
    lambda: f64,
    targets: Vec<usize>,
    config: &'a SolverConfig,
    warm: Option<Vec<f64>>,
    cache: Mutex<HashMap<Vec<u64>, Arc<FitResult>>>,
    hits: AtomicUsize,
    fits: AtomicUsize,
}

impl<'a> ProfileEvaluator<'a> {
    pub fn new(
        model: &'a ModelSpec,
        data: &'a Dataset,
        lambda: f64,
        targets: Vec<usize>,
        config: &'a SolverConfig,
        warm: Option<Vec<f64>>,
    ) -> Result<Self> {
        PinSet::new(targets.clone(), vec![0.0; targets.len()])?.validate(data.p())?;
        Ok(Self {
            model,
            data,
            lambda,
            targets,
            config,
            warm,
            cache: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            fits: AtomicUsize::new(0),
        })
    }

    pub fn q(&self) -> usize {
        self.targets.len()
    }

    /// Stores a known fit for `theta`, e.g. the unconstrained fit at its own targets.
    pub fn seed(&self, theta: &[f64], fit: FitResult) {
        self.cache
            .lock()
            .expect("profile cache poisoned")
            .entry(key(theta))
            .or_insert_with(|| Arc::new(fit));
    }

    pub fn fit_at(&self, theta: &[f64]) -> Result<Arc<FitResult>> {
        if theta.len() != self.q() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("profile point must be finite with one value per target"));
        }
        let k = key(theta);
        if let Some(hit) = self.cache.lock().expect("profile cache poisoned").get(&k) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(hit));
        }
        let pins = PinSet::new(self.targets.clone(), theta.to_vec())?;
        let fit = fit_penalized(self.model, self.data, self.lambda, &pins, self.warm.as_deref(), self.config)?;
        self.fits.fetch_add(1, Ordering::Relaxed);
        if !fit.converged {
            return Err(Error::NonConvergence {
                stage: Stage::ProfileFit,
                theta: theta.to_vec(),
                iterations: fit.iterations,
            });
        }
        let mut cache = self.cache.lock().expect("profile cache poisoned");
        Ok(Arc::clone(cache.entry(k).or_insert_with(|| Arc::new(fit))))
    }

    /// `A_n(theta)`: unpenalized empirical m at the constrained fit.
    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.fit_at(theta)?.unpenalized_objective)
    }

    /// Fits all uncached points, in parallel.
    pub fn prefetch(&self, points: &[Vec<f64>]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let todo: Vec<&Vec<f64>> = {
            let cache = self.cache.lock().expect("profile cache poisoned");
            points
                .iter()
                .filter(|t| {
                    let k = key(t);
                    !cache.contains_key(&k) && seen.insert(k)
                })
                .collect()
        };
        todo.par_iter()
            .map(|t| self.fit_at(t).map(|_| ()))
            .collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn fits(&self) -> usize {
        self.fits.load(Ordering::Relaxed)
    }
}

/// `A_n(theta)` for the coordinates and values in `pins`.
pub fn profile_value(
    model: &ModelSpec,
    data: &Dataset,
    lambda: f64,
    pins: &PinSet,
    config: &SolverConfig,
) -> Result<f64> {
    let fit = fit_penalized(model, data, lambda, pins, None, config)?;
    if !fit.converged {
        return Err(Error::NonConvergence {
            stage: Stage::ProfileFit,
            theta: pins.values().to_vec(),
            iterations: fit.iterations,
        });
    }
    Ok(fit.unpenalized_objective)
}

/// Backward differences `[A(theta) - A(theta - h e_j)] / h`.
pub fn numeric_gradient<F>(a: F, theta: &[f64], h1: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h1 > 0.0) {
        return Err(Error::invalid("h1 must be positive"));
    }
    let a0 = a(theta)?;
    (0..theta.len())
        .map(|j| Ok((a0 - a(&shifted(theta, j, h1))?) / h1))
        .collect()
}

/// Backward second differences
/// `[A(t) - A(t - h e_j) - A(t - h e_k) + A(t - h e_j - h e_k)] / h^2`.
pub fn numeric_hessian<F>(a: F, theta: &[f64], h2: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h2 > 0.0) {
        return Err(Error::invalid("h2 must be positive"));
    }
    let q = theta.len();
    let a0 = a(theta)?;
    let single: Vec<f64> = (0..q)
        .map(|j| a(&shifted(theta, j, h2)))
        .collect::<Result<_>>()?;
    let mut h = DMatrix::zeros(q, q);
    for j in 0..q {
        for k in j..q {
            let ajk = a(&shifted(&shifted(theta, j, h2), k, h2))?;
            let v = (a0 - single[j] - single[k] + ajk) / (h2 * h2);
            h[(j, k)] = v;
            h[(k, j)] = v;
        }
    }
    Ok(h)
}

/// Every point the gradient and Hessian at `theta` evaluate.
pub fn difference_grid(theta: &[f64], h1: f64, h2: f64) -> Vec<Vec<f64>> {
    let q = theta.len();
    let mut pts = vec![theta.to_vec()];
    for j in 0..q {
        pts.push(shifted(theta, j, h1));
        pts.push(shifted(theta, j, h2));
        for k in j..q {
            pts.push(shifted(&shifted(theta, j, h2), k, h2));
        }
    }
    pts
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    let ev = h.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_conditioning(hess: &DMatrix<f64>, stage: Stage) -> Result<()> {
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            stage,
            message: "curvature matrix has non-finite entries".into(),
        });
    }
    let condition = condition_number(hess);
    if !(condition < MAX_CONDITION) {
        return Err(Error::Singular { stage, condition });
    }
    Ok(())
}

/// Newton step `theta - hess^-1 grad`, solved without forming the inverse.
pub fn one_step_update(theta: &[f64], grad: &[f64], hess: &DMatrix<f64>) -> Result<Vec<f64>> {
    let q = theta.len();
    if grad.len() != q || hess.nrows() != q || hess.ncols() != q {
        return Err(Error::invalid("dimension mismatch in one-step update"));
    }
    check_conditioning(hess, Stage::OneStep)?;
    let step = hess
        .clone()
        .lu()
        .solve(&DVector::from_column_slice(grad))
        .ok_or(Error::Singular {
            stage: Stage::OneStep,
            condition: f64::INFINITY,
        })?;
    Ok(theta.iter().zip(step.iter()).map(|(t, s)| t - s).collect())
}

/// `hess - eps I` with `eps = 1e-8 ||hess||`.
pub fn ridge_regularize(hess: &DMatrix<f64>) -> DMatrix<f64> {
    let eps = RIDGE_SCALE * hess.norm();
    hess - DMatrix::identity(hess.nrows(), hess.ncols()) * eps
}

fn invert_with_fallback(hess: &DMatrix<f64>, stage: Stage) -> Result<(DMatrix<f64>, bool)> {
    let (h, ridged) = match check_conditioning(hess, stage) {
        Ok(()) => (hess.clone(), false),
        Err(Error::Singular { condition, .. }) => {
            log::warn!("{stage}: condition estimate {condition:e}; using ridge-regularized curvature");
            let r = ridge_regularize(hess);
            check_conditioning(&r, stage)?;
            (r, true)
        }
        Err(e) => return Err(e),
    };
    let inv = h.try_inverse().ok_or(Error::Singular {
        stage,
        condition: f64::INFINITY,
    })?;
    Ok((inv, ridged))
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn psd_projection(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// `n^-1 H^-1 (P_n s s^T) H^-1` from per-observation differences `s` (n rows, q columns).
pub fn sandwich_from_differences(diffs: &DMatrix<f64>, hess: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let n = diffs.nrows() as f64;
    let meat = diffs.transpose() * diffs / n;
    let (inv, ridged) = invert_with_fallback(hess, Stage::Variance)?;
    let cov = &inv * meat * &inv / n;
    Ok((psd_projection(&cov), ridged))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpmeConfig {
    pub solver: SolverConfig,
    /// Overrides for the default `0.75 n^-0.26` steps.
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    /// Skips cross-validation when set.
    pub lambda: Option<f64>,
    pub alpha_levels: Vec<f64>,
    /// Adds `h1/2` times the second difference to every backward first
    /// difference, which cancels the leading error term of the one-sided
    /// scheme. Off reproduces the plain backward-difference update.
    pub curvature_correction: bool,
}

impl Default for DpmeConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            h1: None,
            h2: None,
            lambda: None,
            alpha_levels: vec![0.05, 0.10],
            curvature_correction: true,
        }
    }
}

impl DpmeConfig {
    pub fn plan(&self, n: usize, targets: Vec<usize>) -> Result<PerturbationPlan> {
        let h = default_step(n);
        PerturbationPlan::new(self.h1.unwrap_or(h), self.h2.unwrap_or(h), targets)
    }

    fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.alpha_levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("confidence levels must lie in (0, 1)"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid("lambda must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub alpha: f64,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasResult {
    pub targets: Vec<usize>,
    pub theta_init: Vec<f64>,
    pub theta_debiased: Vec<f64>,
    /// Raw backward-difference gradient at `theta_init`.
    pub grad: Vec<f64>,
    /// Hessian at `theta_init`, row-major.
    pub hess: Vec<Vec<f64>>,
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub intervals: Vec<ConfidenceInterval>,
    /// Two-sided normal p-values against zero.
    pub p_values: Vec<f64>,
    pub lambda: f64,
    pub h1: f64,
    pub h2: f64,
    pub ridge_used: bool,
    pub initial_iterations: usize,
    pub profile_fits: usize,
    pub cache_hits: usize,
}

impl DebiasResult {
    pub fn interval(&self, alpha: f64) -> Option<&ConfidenceInterval> {
        self.intervals.iter().find(|c| (c.alpha - alpha).abs() < 1e-12)
    }

    pub fn hess_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.hess)
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.cov)
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let q = rows.len();
    DMatrix::from_fn(q, q, |i, j| rows[i][j])
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn intervals(theta: &[f64], se: &[f64], alphas: &[f64]) -> Vec<ConfidenceInterval> {
    alphas
        .iter()
        .map(|&alpha| {
            let z = normal_quantile(1.0 - alpha / 2.0);
            ConfidenceInterval {
                alpha,
                low: theta.iter().zip(se).map(|(t, s)| t - z * s).collect(),
                high: theta.iter().zip(se).map(|(t, s)| t + z * s).collect(),
            }
        })
        .collect()
}

pub(crate) fn p_values(theta: &[f64], se: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(se)
        .map(|(&t, &s)| {
            if s > 0.0 {
                two_sided_p(t / s)
            } else if t == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Applies the curvature correction to raw first differences.
fn corrected_gradient(grad: &[f64], hess: &DMatrix<f64>, h1: f64, on: bool) -> Vec<f64> {
    grad.iter()
        .enumerate()
        .map(|(j, g)| if on { g + 0.5 * h1 * hess[(j, j)] } else { *g })
        .collect()
}

/// Sandwich covariance at `theta` from an evaluator's cached fits.
fn sandwich_at(
    ev: &ProfileEvaluator<'_>,
    theta: &[f64],
    plan: &PerturbationPlan,
    correction: bool,
) -> Result<(DMatrix<f64>, bool)> {
    let (h1, h2) = (plan.h1, plan.h2);
    let q = theta.len();
    ev.prefetch(&difference_grid(theta, h1, h2))?;
    let hess = numeric_hessian(|t| ev.value(t), theta, h2)?;
    let m0 = m_values(ev.model, ev.data, &ev.fit_at(theta)?.beta);
    let n = m0.len();
    let mut diffs = DMatrix::zeros(n, q);
    for j in 0..q {
        let m1 = m_values(ev.model, ev.data, &ev.fit_at(&shifted(theta, j, h1))?.beta);
        for i in 0..n {
            diffs[(i, j)] = (m0[i] - m1[i]) / h1;
        }
        if correction {
            let once = shifted(theta, j, h2);
            let ma = m_values(ev.model, ev.data, &ev.fit_at(&once)?.beta);
            let mb = m_values(ev.model, ev.data, &ev.fit_at(&shifted(&once, j, h2))?.beta);
            for i in 0..n {
                let d2 = (m0[i] - 2.0 * ma[i] + mb[i]) / (h2 * h2);
                diffs[(i, j)] += 0.5 * h1 * d2;
            }
        }
    }
    sandwich_from_differences(&diffs, &hess)
}

/// Sandwich covariance of the debiased targets at `theta_debiased`.
pub fn sandwich_variance(
    model: &ModelSpec,
    data: &Dataset,
    lambda: f64,
    theta_debiased: &[f64],
    plan: &PerturbationPlan,
    config: &DpmeConfig,
) -> Result<DMatrix<f64>> {
    let ev = ProfileEvaluator::new(model, data, lambda, plan.target_indices.clone(), &config.solver, None)?;
    Ok(sandwich_at(&ev, theta_debiased, plan, config.curvature_correction)?.0)
}

/// Debiases `plan.target_indices` given the unconstrained penalized fit.
pub fn debias_from_fit(
    model: &ModelSpec,
    data: &Dataset,
    initial: &FitResult,
    plan: &PerturbationPlan,
    config: &DpmeConfig,
) -> Result<DebiasResult> {
    let targets = plan.target_indices.clone();
    let lambda = initial.lambda;
    let theta_init: Vec<f64> = targets.iter().map(|&j| initial.beta[j]).collect();
    let ev = ProfileEvaluator::new(model, data, lambda, targets.clone(), &config.solver, Some(initial.beta.clone()))?;
    ev.seed(&theta_init, initial.clone());

    ev.prefetch(&difference_grid(&theta_init, plan.h1, plan.h2))?;
    let grad = numeric_gradient(|t| ev.value(t), &theta_init, plan.h1)?;
    let hess = numeric_hessian(|t| ev.value(t), &theta_init, plan.h2)?;
    let g = corrected_gradient(&grad, &hess, plan.h1, config.curvature_correction);

    let (theta_debiased, ridge_step) = match one_step_update(&theta_init, &g, &hess) {
        Ok(t) => (t, false),
        Err(Error::Singular { condition, .. }) => {
            log::warn!("one-step update: condition estimate {condition:e}; using ridge-regularized curvature");
            (one_step_update(&theta_init, &g, &ridge_regularize(&hess))?, true)
        }
        Err(e) => return Err(e),
    };

    let (cov, ridge_var) = sandwich_at(&ev, &theta_debiased, plan, config.curvature_correction)?;
    let se: Vec<f64> = (0..targets.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    Ok(DebiasResult {
        intervals: intervals(&theta_debiased, &se, &config.alpha_levels),
        p_values: p_values(&theta_debiased, &se),
        targets,
        theta_init,
        grad,
        hess: matrix_to_rows(&hess),
        cov: matrix_to_rows(&cov),
        se,
        theta_debiased,
        lambda,
        h1: plan.h1,
        h2: plan.h2,
        ridge_used: ridge_step || ridge_var,
        initial_iterations: initial.iterations,
        profile_fits: ev.fits(),
        cache_hits: ev.cache_hits(),
    })
}

/// Cross-validated (or fixed) lambda and the unconstrained penalized fit.
pub fn initial_fit(model: &ModelSpec, data: &Dataset, config: &DpmeConfig) -> Result<FitResult> {
    config.validate()?;
    model.validate(data)?;
    let lambda = match config.lambda {
        Some(l) => l,
        None => cv_select_lambda(model, data, &PinSet::empty(), &config.solver)?,
    };
    let fit = fit_penalized(model, data, lambda, &PinSet::empty(), None, &config.solver)?;
    if !fit.converged {
        return Err(Error::NonConvergence {
            stage: Stage::InitialFit,
            theta: Vec::new(),
            iterations: fit.iterations,
        });
    }
    Ok(fit)
}

fn check_targets(data: &Dataset, targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::invalid("at least one target coordinate is required"));
    }
    let pins = PinSet::new(targets.to_vec(), vec![0.0; targets.len()])?;
    pins.validate(data.p())
}

/// Joint debiasing of all `targets`.
pub fn run_dpme(model: &ModelSpec, data: &Dataset, targets: &[usize], config: &DpmeConfig) -> Result<DebiasResult> {
    check_targets(data, targets)?;
    let plan = config.plan(data.n(), targets.to_vec())?;
    let initial = initial_fit(model, data, config)?;
    debias_from_fit(model, data, &initial, &plan, config)
}

/// One single-coordinate debiasing per target, sharing lambda and the initial fit.
pub fn run_dpme_marginal(
    model: &ModelSpec,
    data: &Dataset,
    targets: &[usize],
    config: &DpmeConfig,
) -> Result<Vec<DebiasResult>> {
    check_targets(data, targets)?;
    let initial = initial_fit(model, data, config)?;
    targets
        .iter()
        .map(|&j| {
            let plan = config.plan(data.n(), vec![j])?;
            debias_from_fit(model, data, &initial, &plan, config).map_err(|e| e.context(format!("coordinate {j}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quad(theta: &[f64]) -> Result<f64> {
        Ok(-(theta[0] - 1.0).powi(2) / 2.0)
    }

    #[test]
    fn backward_gradient_of_quadratic_carries_half_step() {
        let g = numeric_gradient(quad, &[1.0], 0.1).unwrap();
        assert_abs_diff_eq!(g[0], 0.05, epsilon = 1e-12);
        let c = numeric_gradient(|_| Ok(3.0), &[0.2, -1.0], 0.1).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn second_difference_of_quadratic_is_exact() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let a = |t: &[f64]| {
            let v = DVector::from_column_slice(t);
            Ok(-0.5 * (v.transpose() * &m * &v)[(0, 0)])
        };
        let h = numeric_hessian(a, &[0.3, -0.7], 0.01).unwrap();
        assert!((h + &m).abs().max() < 1e-9);
        let h1 = numeric_hessian(quad, &[1.0], 0.5).unwrap();
        assert_eq!(h1[(0, 0)], -1.0);
    }

    #[test]
    fn newton_arithmetic() {
        let h = DMatrix::from_element(1, 1, -2.0);
        assert_abs_diff_eq!(one_step_update(&[0.5], &[0.1], &h).unwrap()[0], 0.55, epsilon = 1e-15);
        assert_eq!(one_step_update(&[0.5], &[0.0], &h).unwrap(), vec![0.5]);
    }

    #[test]
    fn singular_curvature_is_reported_and_ridge_recovers() {
        let h = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, -1.0, -1.0]);
        let err = one_step_update(&[0.0, 0.0], &[1.0, 1.0], &h).unwrap_err();
        assert!(matches!(err, Error::Singular { stage: Stage::OneStep, .. }));
        let r = ridge_regularize(&h);
        assert!(condition_number(&r) < MAX_CONDITION);
    }

    #[test]
    fn constant_differences_give_degenerate_meat() {
        let (c, h, n) = (0.7, -2.0, 40);
        let diffs = DMatrix::from_element(n, 1, c);
        let (cov, ridged) = sandwich_from_differences(&diffs, &DMatrix::from_element(1, 1, h)).unwrap();
        assert!(!ridged);
        assert_abs_diff_eq!(cov[(0, 0)], (c / h).powi(2) / n as f64, epsilon = 1e-15);
    }

    #[test]
    fn psd_projection_clips_negative_directions() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_projection(&c);
        assert!(p.clone().symmetric_eigenvalues().iter().all(|&v| v >= -1e-15));
        assert_eq!(p[(0, 1)], p[(1, 0)]);
        assert_abs_diff_eq!(p[(0, 0)], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn default_plan_step() {
        let plan = PerturbationPlan::default_for(1000, vec![0]).unwrap();
        assert_abs_diff_eq!(plan.h1, 0.75 * 1000f64.powf(-0.26), epsilon = 1e-15);
        assert_eq!(plan.h1, plan.h2);
        assert!(PerturbationPlan::new(0.1, 0.1, vec![1, 1]).is_err());
        assert!(PerturbationPlan::new(0.0, 0.1, vec![1]).is_err());
    }
}
