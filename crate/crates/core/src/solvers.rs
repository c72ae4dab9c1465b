//! Penalized M-estimation by cyclic coordinate descent.
//!
//! All families maximize `P_n m(Z, beta) - lambda * sum_j |beta_j|` over the
//! free coordinates. Pinned coordinates enter the linear predictor as an
//! offset and are never updated; constant-one columns (intercepts) are free
//! but unpenalized. The linear family is solved directly; the logistic
//! families use an IRLS outer loop with a coordinate-descent pass on each
//! local quadratic.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::model::{sigmoid, Dataset, FitResult, ModelSpec, PinSet, Response, ResponseKind};

const IRLS_WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Budget of coordinate-descent sweeps per fit.
    pub max_iter: usize,
    /// Stop a pass once no coefficient moves by more than this.
    pub tol: f64,
    pub kkt_tol: f64,
    pub cv_folds: usize,
    pub lambda_grid_size: usize,
    pub lambda_min_ratio: f64,
    pub seed: u64,
    pub max_irls: usize,
    /// IRLS stops once the linear predictor moves less than this.
    pub irls_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-7,
            kkt_tol: 1e-5,
            cv_folds: 10,
            lambda_grid_size: 100,
            lambda_min_ratio: 1e-3,
            seed: 0,
            max_irls: 50,
            irls_tol: 1e-7,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0 && self.kkt_tol > 0.0 && self.irls_tol > 0.0) {
            return Err(Error::invalid("solver tolerances must be positive"));
        }
        if self.cv_folds < 2 {
            return Err(Error::invalid("cv_folds must be at least 2"));
        }
        if self.lambda_grid_size < 1 || !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::invalid("invalid lambda grid settings"));
        }
        Ok(())
    }
}

/// Penalized objective recorded after one coordinate-descent sweep.
///
/// For the linear family this is the exact penalized objective. For the
/// IRLS families it is the penalized local quadratic of outer step `outer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub outer: usize,
    pub objective: f64,
}

struct Engine<'a> {
    data: &'a Dataset,
    resp: Response,
    lambda: f64,
    free: Vec<usize>,
    penalized: Vec<bool>,
    config: &'a SolverConfig,
}

impl<'a> Engine<'a> {
    fn new(
        model: &ModelSpec,
        data: &'a Dataset,
        lambda: f64,
        pins: &PinSet,
        config: &'a SolverConfig,
    ) -> Self {
        let p = data.p();
        let mut free = Vec::with_capacity(p);
        let mut penalized = vec![false; p];
        for j in 0..p {
            if pins.get(j).is_none() {
                free.push(j);
                penalized[j] = !data.is_intercept_column(j);
            }
        }
        Self {
            data,
            resp: model.response(data),
            lambda,
            free,
            penalized,
            config,
        }
    }

    fn n(&self) -> f64 {
        self.data.n() as f64
    }

    fn penalty(&self, beta: &[f64]) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        self.lambda
            * self
                .free
                .iter()
                .filter(|&&j| self.penalized[j])
                .map(|&j| beta[j].abs())
                .sum::<f64>()
    }

    fn gradient(&self, eta: &[f64], j: usize) -> f64 {
        let col = self.data.column(j);
        let mut g = 0.0;
        for (i, (&e, &x)) in eta.iter().zip(col).enumerate() {
            g += self.resp.score(i, e) * x;
        }
        g / self.n()
    }

    fn kkt(&self, eta: &[f64], beta: &[f64]) -> f64 {
        let scores: Vec<f64> = eta
            .iter()
            .enumerate()
            .map(|(i, &e)| self.resp.score(i, e))
            .collect();
        self.free
            .iter()
            .map(|&j| {
                let g = dot(&scores, self.data.column(j)) / self.n();
                subgradient_violation(g, beta[j], self.lambda, self.penalized[j])
            })
            .fold(0.0, f64::max)
    }

    /// One pass over `coords` on the weighted quadratic
    /// `-(1/2n) sum_i w_i (z_i - eta_i)^2`, with `resid = z - eta`.
    fn sweep(
        &self,
        coords: &[usize],
        w: &[f64],
        curv: &[f64],
        beta: &mut [f64],
        resid: &mut [f64],
    ) -> f64 {
        let n = self.n();
        let mut max_delta = 0.0f64;
        for &j in coords {
            let c = curv[j];
            if c <= 0.0 {
                continue;
            }
            let col = self.data.column(j);
            let mut g = 0.0;
            for ((&wi, &xi), &ri) in w.iter().zip(col).zip(resid.iter()) {
                g += wi * xi * ri;
            }
            let u = g / n + c * beta[j];
            let new = if self.penalized[j] {
                soft_threshold(u, self.lambda) / c
            } else {
                u / c
            };
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, &xi) in resid.iter_mut().zip(col) {
                    *r -= delta * xi;
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        max_delta
    }

    fn local_objective(&self, w: &[f64], resid: &[f64], beta: &[f64]) -> f64 {
        let q: f64 = w.iter().zip(resid).map(|(wi, r)| wi * r * r).sum();
        -0.5 * q / self.n() - self.penalty(beta)
    }

    fn curvature(&self, w: &[f64]) -> Vec<f64> {
        let mut curv = vec![0.0; self.data.p()];
        for &j in &self.free {
            let col = self.data.column(j);
            curv[j] = w.iter().zip(col).map(|(wi, x)| wi * x * x).sum::<f64>() / self.n();
        }
        curv
    }

    /// Cyclic coordinate descent with an active-set inner loop. Returns true
    /// when a full sweep moved no coefficient by `tol` or more.
    #[allow(clippy::too_many_arguments)]
    fn descend(
        &self,
        w: &[f64],
        curv: &[f64],
        beta: &mut [f64],
        resid: &mut [f64],
        tol: f64,
        sweeps: &mut usize,
        outer: usize,
        mut trace: Option<&mut Vec<SweepRecord>>,
    ) -> bool {
        let record = |beta: &[f64], resid: &[f64], trace: &mut Option<&mut Vec<SweepRecord>>| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(SweepRecord {
                    outer,
                    objective: self.local_objective(w, resid, beta),
                });
            }
        };
        loop {
            let d = self.sweep(&self.free, w, curv, beta, resid);
            *sweeps += 1;
            record(beta, resid, &mut trace);
            if d < tol {
                return true;
            }
            if *sweeps >= self.config.max_iter {
                return false;
            }
            let active: Vec<usize> = self
                .free
                .iter()
                .copied()
                .filter(|&j| beta[j] != 0.0 || !self.penalized[j])
                .collect();
            loop {
                let d = self.sweep(&active, w, curv, beta, resid);
                *sweeps += 1;
                record(beta, resid, &mut trace);
                if d < tol {
                    break;
                }
                if *sweeps >= self.config.max_iter {
                    return false;
                }
            }
        }
    }

    fn solve(&self, beta: &mut [f64], trace: Option<&mut Vec<SweepRecord>>) -> (usize, bool, f64) {
        match self.resp.kind {
            ResponseKind::Quadratic => self.solve_quadratic(beta, trace),
            ResponseKind::Binomial => self.solve_irls(beta, trace),
        }
    }

    fn solve_quadratic(
        &self,
        beta: &mut [f64],
        mut trace: Option<&mut Vec<SweepRecord>>,
    ) -> (usize, bool, f64) {
        let w = &self.resp.weight;
        let curv = self.curvature(w);
        let mut sweeps = 0;
        let mut tol = self.config.tol;
        loop {
            let eta = self.data.linear_predictor(beta);
            let mut resid: Vec<f64> = self.resp.target.iter().zip(&eta).map(|(t, e)| t - e).collect();
            let ok = self.descend(w, &curv, beta, &mut resid, tol, &mut sweeps, 0, trace.as_deref_mut());
            let eta = self.data.linear_predictor(beta);
            let kkt = self.kkt(&eta, beta);
            if ok && kkt <= self.config.kkt_tol {
                return (sweeps, true, kkt);
            }
            if !ok || sweeps >= self.config.max_iter || tol < 1e-15 {
                return (sweeps, false, kkt);
            }
            tol *= 0.1;
        }
    }

    fn solve_irls(
        &self,
        beta: &mut [f64],
        mut trace: Option<&mut Vec<SweepRecord>>,
    ) -> (usize, bool, f64) {
        let n = self.data.n();
        let mut eta = self.data.linear_predictor(beta);
        let mut objective = self.resp.mean_m(&eta) - self.penalty(beta);
        let mut sweeps = 0;
        let mut tol = self.config.tol;
        let mut kkt = f64::INFINITY;
        let mut w = vec![0.0; n];
        let mut resid = vec![0.0; n];
        for outer in 0..self.config.max_irls {
            for i in 0..n {
                let mu = sigmoid(eta[i]);
                let v = (mu * (1.0 - mu)).max(IRLS_WEIGHT_FLOOR);
                w[i] = self.resp.weight[i] * v;
                resid[i] = if w[i] > 0.0 {
                    (self.resp.target[i] - mu) / v
                } else {
                    0.0
                };
            }
            let curv = self.curvature(&w);
            let beta_old = beta.to_vec();
            let eta_old = eta.clone();
            let ok = self.descend(&w, &curv, beta, &mut resid, tol, &mut sweeps, outer, trace.as_deref_mut());
            eta = self.data.linear_predictor(beta);
            let mut obj = self.resp.mean_m(&eta) - self.penalty(beta);
            let mut halvings = 0;
            while obj < objective - 1e-12 * objective.abs().max(1.0) && halvings < 30 {
                for &j in &self.free {
                    beta[j] = 0.5 * (beta[j] + beta_old[j]);
                }
                eta = self.data.linear_predictor(beta);
                obj = self.resp.mean_m(&eta) - self.penalty(beta);
                halvings += 1;
            }
            objective = obj;
            let moved = eta
                .iter()
                .zip(&eta_old)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if !ok || sweeps >= self.config.max_iter {
                kkt = self.kkt(&eta, beta);
                return (sweeps, false, kkt);
            }
            if moved < self.config.irls_tol {
                kkt = self.kkt(&eta, beta);
                if kkt <= self.config.kkt_tol {
                    return (sweeps, true, kkt);
                }
                tol = (tol * 0.1).max(1e-15);
            }
        }
        if kkt.is_infinite() {
            kkt = self.kkt(&eta, beta);
        }
        (sweeps, false, kkt)
    }

    fn finish(&self, beta: Vec<f64>, sweeps: usize, converged: bool, kkt: f64) -> FitResult {
        let eta = self.data.linear_predictor(&beta);
        let unpenalized = self.resp.mean_m(&eta);
        FitResult {
            penalized_objective: unpenalized - self.penalty(&beta),
            unpenalized_objective: unpenalized,
            lambda: self.lambda,
            iterations: sweeps,
            converged,
            kkt_residual: kkt,
            beta,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn soft_threshold(u: f64, lambda: f64) -> f64 {
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

/// Magnitude by which gradient component `g` violates the subgradient
/// optimality condition at coefficient `b`.
fn subgradient_violation(g: f64, b: f64, lambda: f64, penalized: bool) -> f64 {
    if !penalized {
        g.abs()
    } else if b > 0.0 {
        (g - lambda).abs()
    } else if b < 0.0 {
        (g + lambda).abs()
    } else {
        (g.abs() - lambda).max(0.0)
    }
}

fn check_inputs(
    model: &ModelSpec,
    data: &Dataset,
    lambda: f64,
    pins: &PinSet,
    warm_start: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<()> {
    model.validate(data)?;
    config.validate()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    pins.validate(data.p())?;
    if let Some(w) = warm_start {
        if w.len() != data.p() {
            return Err(Error::invalid("warm start has the wrong length"));
        }
    }
    Ok(())
}

fn initial_beta(data: &Dataset, pins: &PinSet, warm_start: Option<&[f64]>) -> Vec<f64> {
    let mut beta = warm_start.map_or_else(|| vec![0.0; data.p()], <[f64]>::to_vec);
    for (&j, &v) in pins.indices().iter().zip(pins.values()) {
        beta[j] = v;
    }
    beta
}

/// Penalized fit with coordinates in `pins` held fixed.
///
/// Non-convergence is reported through `FitResult::converged`, not as an error.
pub fn fit_penalized(
    model: &ModelSpec,
    data: &Dataset,
    lambda: f64,
    pins: &PinSet,
    warm_start: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<FitResult> {
    check_inputs(model, data, lambda, pins, warm_start, config)?;
    let engine = Engine::new(model, data, lambda, pins, config);
    let mut beta = initial_beta(data, pins, warm_start);
    let (sweeps, converged, kkt) = engine.solve(&mut beta, None);
    Ok(engine.finish(beta, sweeps, converged, kkt))
}

/// As [`fit_penalized`], also returning the objective after every sweep.
pub fn fit_penalized_traced(
    model: &ModelSpec,
    data: &Dataset,
    lambda: f64,
    pins: &PinSet,
    warm_start: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<(FitResult, Vec<SweepRecord>)> {
    check_inputs(model, data, lambda, pins, warm_start, config)?;
    let engine = Engine::new(model, data, lambda, pins, config);
    let mut beta = initial_beta(data, pins, warm_start);
    let mut trace = Vec::new();
    let (sweeps, converged, kkt) = engine.solve(&mut beta, Some(&mut trace));
    Ok((engine.finish(beta, sweeps, converged, kkt), trace))
}

/// Largest subgradient violation over the free coordinates.
pub fn kkt_residual(model: &ModelSpec, data: &Dataset, beta: &[f64], lambda: f64, pins: &PinSet) -> f64 {
    let config = SolverConfig::default();
    let engine = Engine::new(model, data, lambda, pins, &config);
    let eta = data.linear_predictor(beta);
    engine.kkt(&eta, beta)
}

/// Smallest lambda at which every penalized free coefficient is zero.
pub fn lambda_max(model: &ModelSpec, data: &Dataset, pins: &PinSet, config: &SolverConfig) -> Result<f64> {
    check_inputs(model, data, 0.0, pins, None, config)?;
    let mut engine = Engine::new(model, data, 0.0, pins, config);
    let penalized: Vec<usize> = engine
        .free
        .iter()
        .copied()
        .filter(|&j| engine.penalized[j])
        .collect();
    if penalized.is_empty() {
        return Ok(0.0);
    }
    // Null model: only the unpenalized free coordinates move.
    let mut beta = initial_beta(data, pins, None);
    engine.free.retain(|&j| !engine.penalized[j]);
    if !engine.free.is_empty() {
        engine.solve(&mut beta, None);
    }
    let eta = data.linear_predictor(&beta);
    Ok(penalized
        .iter()
        .map(|&j| engine.gradient(&eta, j).abs())
        .fold(0.0, f64::max))
}

/// Log-spaced descending grid from `lambda_max` to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, size: usize, min_ratio: f64) -> Vec<f64> {
    if lambda_max <= f64::EPSILON || size == 1 {
        return vec![lambda_max.max(0.0)];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * min_ratio).ln());
    (0..size)
        .map(|k| {
            if k == 0 {
                lambda_max
            } else {
                (hi + (lo - hi) * k as f64 / (size - 1) as f64).exp()
            }
        })
        .collect()
}

/// Fold label for every row; rows are shuffled with `seed` and dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut label = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        label[i] = pos % folds;
    }
    label
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    /// Mean out-of-fold negative m per grid point.
    pub mean_loss: Vec<f64>,
    pub fold_loss: Vec<Vec<f64>>,
    pub selected_index: usize,
    pub selected: f64,
    /// Seed the accepted fold assignment was drawn with.
    pub fold_seed: u64,
}

fn fold_is_degenerate(resp: &Response) -> bool {
    if resp.kind != ResponseKind::Binomial {
        return false;
    }
    let pos: f64 = resp.target.iter().zip(&resp.weight).map(|(t, w)| t * w).sum();
    let neg: f64 = resp.target.iter().zip(&resp.weight).map(|(t, w)| (1.0 - t) * w).sum();
    pos <= 0.0 || neg <= 0.0
}

struct Fold {
    train: Dataset,
    train_model: ModelSpec,
    test: Dataset,
    test_model: ModelSpec,
}

fn build_folds(model: &ModelSpec, data: &Dataset, k: usize, seed: u64) -> (Vec<Fold>, bool) {
    let label = fold_assignment(data.n(), k, seed);
    let mut degenerate = false;
    let folds = (0..k)
        .map(|f| {
            let train_rows: Vec<usize> = (0..data.n()).filter(|&i| label[i] != f).collect();
            let test_rows: Vec<usize> = (0..data.n()).filter(|&i| label[i] == f).collect();
            let train = data.select_rows(&train_rows);
            let train_model = model.select_rows(&train_rows);
            if fold_is_degenerate(&train_model.response(&train)) {
                degenerate = true;
            }
            Fold {
                train,
                train_model,
                test: data.select_rows(&test_rows),
                test_model: model.select_rows(&test_rows),
            }
        })
        .collect();
    (folds, degenerate)
}

/// Out-of-fold loss along the grid for one fold, warm-starting down the path.
fn fold_path_loss(fold: &Fold, lambdas: &[f64], pins: &PinSet, config: &SolverConfig) -> Vec<f64> {
    let test_resp = fold.test_model.response(&fold.test);
    let mut warm: Option<Vec<f64>> = None;
    lambdas
        .iter()
        .map(|&lambda| {
            let engine = Engine::new(&fold.train_model, &fold.train, lambda, pins, config);
            let mut beta = initial_beta(&fold.train, pins, warm.as_deref());
            engine.solve(&mut beta, None);
            let eta = fold.test.linear_predictor(&beta);
            warm = Some(beta);
            -test_resp.mean_m(&eta)
        })
        .collect()
}

/// K-fold cross-validation over the log-spaced lambda grid.
pub fn cross_validate(model: &ModelSpec, data: &Dataset, pins: &PinSet, config: &SolverConfig) -> Result<CvResult> {
    check_inputs(model, data, 0.0, pins, None, config)?;
    let k = config.cv_folds;
    if data.n() < k {
        return Err(Error::invalid(format!(
            "cross-validation needs n >= cv_folds ({} < {k})",
            data.n()
        )));
    }
    let lmax = lambda_max(model, data, pins, config)?;
    let lambdas = lambda_grid(lmax, config.lambda_grid_size, config.lambda_min_ratio);

    let mut fold_seed = config.seed;
    let (mut folds, degenerate) = build_folds(model, data, k, fold_seed);
    if degenerate {
        log::warn!("degenerate cross-validation fold; reshuffling with seed {}", config.seed.wrapping_add(1));
        fold_seed = config.seed.wrapping_add(1);
        let (again, still) = build_folds(model, data, k, fold_seed);
        if still {
            return Err(Error::DegenerateFolds(format!(
                "a training fold has a single response class under seeds {} and {}",
                config.seed, fold_seed
            )));
        }
        folds = again;
    }

    let fold_loss: Vec<Vec<f64>> = folds
        .par_iter()
        .map(|fold| fold_path_loss(fold, &lambdas, pins, config))
        .collect();
    let mean_loss: Vec<f64> = (0..lambdas.len())
        .map(|l| fold_loss.iter().map(|f| f[l]).sum::<f64>() / k as f64)
        .collect();
    // Grid is descending: on ties keep the later (smaller) lambda.
    let mut selected_index = 0;
    for (l, &loss) in mean_loss.iter().enumerate() {
        if loss <= mean_loss[selected_index] {
            selected_index = l;
        }
    }
    if !mean_loss[selected_index].is_finite() {
        return Err(Error::Numerical {
            stage: Stage::CrossValidation,
            message: "cross-validated loss is not finite".into(),
        });
    }
    Ok(CvResult {
        selected: lambdas[selected_index],
        lambdas,
        mean_loss,
        fold_loss,
        selected_index,
        fold_seed,
    })
}

/// Lambda minimizing the mean out-of-fold negative m.
pub fn cv_select_lambda(model: &ModelSpec, data: &Dataset, pins: &PinSet, config: &SolverConfig) -> Result<f64> {
    Ok(cross_validate(model, data, pins, config)?.selected)
}
