//! Shared data model: the sample, the m-function families, fit results and
//! coordinate pins.
//!
//! Every family is written as a maximization problem. The per-observation
//! m-functions are
//!
//! * `Linear`: `m = -(y - x'b)^2 / 2`
//! * `Logistic`: `m = y x'b - log(1 + exp(x'b))`
//! * `WeightedLogistic`: `m = -[w+ phi(x'b) + w- phi(-x'b)]` with `phi(t) = log(1 + exp(-t))`
//!
//! Optional observation weights multiply `m` row by row.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `log(1 + exp(t))`, finite for every finite `t`.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic function.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Observed sample: covariates, response, and the optional treatment arm and
/// observation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Vec<f64>,
    treatment: Option<Vec<f64>>,
    obs_weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        Self::with_parts(x, y, None, None)
    }

    pub fn with_parts(
        x: DMatrix<f64>,
        y: Vec<f64>,
        treatment: Option<Vec<f64>>,
        obs_weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 observations, got {n}")));
        }
        if y.len() != n {
            return Err(Error::invalid(format!(
                "response has length {} but x has {n} rows",
                y.len()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite covariate at row {}, column {}",
                pos % n,
                pos / n
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite response at row {i}")));
        }
        if let Some(a) = &treatment {
            if a.len() != n {
                return Err(Error::invalid("treatment length does not match rows"));
            }
            if let Some(i) = a.iter().position(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::invalid(format!(
                    "treatment at row {i} is {}, expected -1 or +1",
                    a[i]
                )));
            }
        }
        if let Some(w) = &obs_weights {
            if w.len() != n {
                return Err(Error::invalid("observation weights length does not match rows"));
            }
            if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::invalid("observation weights must be finite and nonnegative"));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("observation weights must have positive sum"));
            }
        }
        Ok(Self {
            x,
            y,
            treatment,
            obs_weights,
        })
    }

    /// Builds a dataset from row-major covariate rows.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("ragged covariate rows"));
        }
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        Self::new(x, y)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn treatment(&self) -> Option<&[f64]> {
        self.treatment.as_deref()
    }

    pub fn obs_weights(&self) -> Option<&[f64]> {
        self.obs_weights.as_deref()
    }

    /// Contiguous view of covariate column `j`.
    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.x.as_slice()[j * n..(j + 1) * n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Linear predictor `x_i' beta` for every row.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut eta = vec![0.0; n];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (e, &xij) in eta.iter_mut().zip(self.column(j)) {
                    *e += xij * b;
                }
            }
        }
        eta
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(rows),
            y: pick(&self.y),
            treatment: self.treatment.as_ref().map(pick),
            obs_weights: self.obs_weights.as_ref().map(pick),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(cols),
            ..self.clone()
        }
    }

    pub fn with_response(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::with_parts(
            self.x.clone(),
            y,
            self.treatment.clone(),
            self.obs_weights.clone(),
        )
    }

    pub fn with_obs_weights(&self, w: Option<Vec<f64>>) -> Result<Dataset> {
        Dataset::with_parts(self.x.clone(), self.y.clone(), self.treatment.clone(), w)
    }

    /// Appends a constant column of ones as the last covariate.
    pub fn with_intercept_column(&self) -> Dataset {
        let n = self.n();
        let p = self.p();
        let x = self.x.clone().insert_column(p, 1.0);
        debug_assert_eq!(x.nrows(), n);
        Dataset { x, ..self.clone() }
    }

    /// Centers and scales every non-constant column to unit sample variance.
    pub fn standardized(&self) -> Dataset {
        let n = self.n() as f64;
        let mut x = self.x.clone();
        for j in 0..self.p() {
            let col = self.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if var > 0.0 {
                let sd = var.sqrt();
                for (dst, &v) in x.column_mut(j).iter_mut().zip(col) {
                    *dst = (v - mean) / sd;
                }
            }
        }
        Dataset { x, ..self.clone() }
    }

    /// True when column `j` is identically one (an intercept).
    pub fn is_intercept_column(&self, j: usize) -> bool {
        self.column(j).iter().all(|&v| v == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Logistic,
    WeightedLogistic,
}

/// An m-function family, with the per-observation weights the weighted
/// logistic surrogate needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    family: Family,
    weights_pos: Option<Vec<f64>>,
    weights_neg: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn linear() -> Self {
        Self {
            family: Family::Linear,
            weights_pos: None,
            weights_neg: None,
        }
    }

    pub fn logistic() -> Self {
        Self {
            family: Family::Logistic,
            weights_pos: None,
            weights_neg: None,
        }
    }

    pub fn weighted_logistic(weights_pos: Vec<f64>, weights_neg: Vec<f64>) -> Result<Self> {
        if weights_pos.len() != weights_neg.len() {
            return Err(Error::invalid("weight vectors differ in length"));
        }
        if weights_pos
            .iter()
            .chain(&weights_neg)
            .any(|&w| !w.is_finite() || w < 0.0)
        {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        Ok(Self {
            family: Family::WeightedLogistic,
            weights_pos: Some(weights_pos),
            weights_neg: Some(weights_neg),
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn weights_pos(&self) -> Option<&[f64]> {
        self.weights_pos.as_deref()
    }

    pub fn weights_neg(&self) -> Option<&[f64]> {
        self.weights_neg.as_deref()
    }

    /// Checks the spec against a dataset.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        match self.family {
            Family::WeightedLogistic => match (&self.weights_pos, &self.weights_neg) {
                (Some(a), Some(b)) if a.len() == data.n() && b.len() == data.n() => Ok(()),
                (Some(_), Some(_)) => Err(Error::invalid(
                    "weighted-logistic weights do not match the number of rows",
                )),
                _ => Err(Error::invalid("weighted-logistic model requires both weight vectors")),
            },
            Family::Logistic => {
                if let Some(i) = data.y().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::invalid(format!(
                        "logistic response at row {i} is outside [0, 1]"
                    )));
                }
                self.forbid_weights()
            }
            Family::Linear => self.forbid_weights(),
        }
    }

    fn forbid_weights(&self) -> Result<()> {
        if self.weights_pos.is_some() || self.weights_neg.is_some() {
            return Err(Error::invalid("only the weighted-logistic family takes arm weights"));
        }
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> ModelSpec {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        ModelSpec {
            family: self.family,
            weights_pos: self.weights_pos.as_ref().map(pick),
            weights_neg: self.weights_neg.as_ref().map(pick),
        }
    }

    /// Per-observation m at linear predictor `eta`, without observation weights.
    #[inline]
    fn m_at(&self, y: f64, eta: f64, i: usize) -> f64 {
        match self.family {
            Family::Linear => -0.5 * (y - eta).powi(2),
            Family::Logistic => y * eta - softplus(eta),
            Family::WeightedLogistic => {
                let wp = self.weights_pos.as_ref().expect("validated")[i];
                let wn = self.weights_neg.as_ref().expect("validated")[i];
                -(wp * softplus(-eta) + wn * softplus(eta))
            }
        }
    }

    /// Quadratic or binomial working form used by the solvers.
    pub(crate) fn response(&self, data: &Dataset) -> Response {
        let n = data.n();
        let obs = |i: usize| data.obs_weights().map_or(1.0, |w| w[i]);
        match self.family {
            Family::Linear => Response {
                kind: ResponseKind::Quadratic,
                target: data.y().to_vec(),
                weight: (0..n).map(obs).collect(),
            },
            Family::Logistic => Response {
                kind: ResponseKind::Binomial,
                target: data.y().to_vec(),
                weight: (0..n).map(obs).collect(),
            },
            Family::WeightedLogistic => {
                let wp = self.weights_pos.as_ref().expect("validated");
                let wn = self.weights_neg.as_ref().expect("validated");
                let mut target = Vec::with_capacity(n);
                let mut weight = Vec::with_capacity(n);
                for i in 0..n {
                    let w = wp[i] + wn[i];
                    target.push(if w > 0.0 { wp[i] / w } else { 0.5 });
                    weight.push(w * obs(i));
                }
                Response {
                    kind: ResponseKind::Binomial,
                    target,
                    weight,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ResponseKind {
    Quadratic,
    Binomial,
}

/// `m_i(eta) = weight_i * g(target_i, eta)` with `g` quadratic or binomial.
#[derive(Debug, Clone)]
pub(crate) struct Response {
    pub kind: ResponseKind,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Response {
    #[inline]
    pub fn m(&self, i: usize, eta: f64) -> f64 {
        let t = self.target[i];
        let g = match self.kind {
            ResponseKind::Quadratic => -0.5 * (t - eta).powi(2),
            ResponseKind::Binomial => t * eta - softplus(eta),
        };
        self.weight[i] * g
    }

    /// d m_i / d eta
    #[inline]
    pub fn score(&self, i: usize, eta: f64) -> f64 {
        let t = self.target[i];
        let r = match self.kind {
            ResponseKind::Quadratic => t - eta,
            ResponseKind::Binomial => t - sigmoid(eta),
        };
        self.weight[i] * r
    }

    pub fn mean_m(&self, eta: &[f64]) -> f64 {
        eta.iter().enumerate().map(|(i, &e)| self.m(i, e)).sum::<f64>() / eta.len() as f64
    }
}

/// `m(Z_i, beta)` for the model family.
pub fn m_value(model: &ModelSpec, data: &Dataset, beta: &[f64], i: usize) -> f64 {
    debug_assert_eq!(beta.len(), data.p());
    let eta: f64 = (0..data.p()).map(|j| data.column(j)[i] * beta[j]).sum();
    m_value_at_eta(model, data, eta, i)
}

pub(crate) fn m_value_at_eta(model: &ModelSpec, data: &Dataset, eta: f64, i: usize) -> f64 {
    let w = data.obs_weights().map_or(1.0, |w| w[i]);
    w * model.m_at(data.y()[i], eta, i)
}

/// Per-observation m values at `beta`.
pub fn m_values(model: &ModelSpec, data: &Dataset, beta: &[f64]) -> Vec<f64> {
    let eta = data.linear_predictor(beta);
    eta.iter()
        .enumerate()
        .map(|(i, &e)| m_value_at_eta(model, data, e, i))
        .collect()
}

/// Empirical mean of `m(Z_i, beta)` over the sample.
pub fn empirical_m(model: &ModelSpec, data: &Dataset, beta: &[f64]) -> f64 {
    let v = m_values(model, data, beta);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Coordinates held fixed during a constrained fit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PinSet {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl PinSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::invalid("pin indices and values differ in length"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pin values must be finite"));
        }
        let mut pairs: Vec<(usize, f64)> = indices.into_iter().zip(values).collect();
        pairs.sort_by_key(|&(j, _)| j);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("duplicate pin index"));
        }
        let (indices, values) = pairs.into_iter().unzip();
        Ok(Self { indices, values })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if let Some(&j) = self.indices.iter().find(|&&j| j >= p) {
            return Err(Error::invalid(format!("pin index {j} out of range for p = {p}")));
        }
        Ok(())
    }

    /// Value pinned at coordinate `j`, if any.
    pub fn get(&self, j: usize) -> Option<f64> {
        self.indices
            .binary_search(&j)
            .ok()
            .map(|k| self.values[k])
    }
}

/// Outcome of one penalized fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub penalized_objective: f64,
    pub unpenalized_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_row(x: f64, y: f64) -> Dataset {
        Dataset::from_rows(&[vec![x], vec![x]], vec![y, y]).unwrap()
    }

    #[test]
    fn m_value_examples() {
        let d = one_row(1.0, 1.0);
        assert_eq!(m_value(&ModelSpec::linear(), &d, &[1.0], 0), 0.0);
        assert_abs_diff_eq!(
            m_value(&ModelSpec::logistic(), &d, &[0.0], 0),
            0.5f64.ln(),
            epsilon = 1e-15
        );
        let wl = ModelSpec::weighted_logistic(vec![3.0, 3.0], vec![0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(m_value(&wl, &d, &[0.0], 0), -3.0 * 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn empirical_m_examples() {
        let d = Dataset::from_rows(&[vec![1.0], vec![1.0]], vec![2.0, 0.0]).unwrap();
        assert_eq!(empirical_m(&ModelSpec::linear(), &d, &[1.0]), -0.5);
        let zero = Dataset::from_rows(&[vec![1.0], vec![2.0]], vec![1.0, 2.0]).unwrap();
        assert_eq!(empirical_m(&ModelSpec::linear(), &zero, &[1.0]), 0.0);
        let lg = Dataset::from_rows(&[vec![0.3], vec![-2.0]], vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            empirical_m(&ModelSpec::logistic(), &lg, &[0.0]),
            -(2f64.ln()),
            epsilon = 1e-15
        );
    }

    #[test]
    fn softplus_is_finite_and_accurate() {
        for &t in &[-800.0, -40.0, -1.0, 0.0, 1e-3, 1.0, 35.0, 800.0] {
            let s = softplus(t);
            assert!(s.is_finite() && s >= 0.0);
            if t.abs() < 30.0 {
                assert_abs_diff_eq!(s, (1.0 + t.exp()).ln(), epsilon = 1e-14);
            }
        }
        assert_eq!(softplus(800.0), 800.0);
        let lg = ModelSpec::logistic();
        let d = Dataset::from_rows(&[vec![1.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        assert!(m_value(&lg, &d, &[1e6], 0).is_finite());
    }

    fn random_instance(seed: u64, n: usize, p: usize) -> (Dataset, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let beta = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (Dataset::from_rows(&rows, y).unwrap(), beta)
    }

    #[test]
    fn linear_matches_residual_norm() {
        for seed in 0..20 {
            let (d, beta) = random_instance(seed, 30, 4);
            let eta = d.linear_predictor(&beta);
            let rss: f64 = d.y().iter().zip(&eta).map(|(y, e)| (y - e).powi(2)).sum();
            let direct = -rss / (2.0 * d.n() as f64);
            assert_abs_diff_eq!(empirical_m(&ModelSpec::linear(), &d, &beta), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn weighted_logistic_specializes_to_logistic() {
        for seed in 0..20 {
            let (d, beta) = random_instance(seed, 25, 3);
            let ones = d.with_response(vec![1.0; d.n()]).unwrap();
            let wl = ModelSpec::weighted_logistic(vec![1.0; d.n()], vec![0.0; d.n()]).unwrap();
            assert_abs_diff_eq!(
                empirical_m(&wl, &ones, &beta),
                empirical_m(&ModelSpec::logistic(), &ones, &beta),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn empirical_m_is_permutation_invariant() {
        let (d, beta) = random_instance(7, 40, 3);
        let mut rows: Vec<usize> = (0..d.n()).collect();
        rows.reverse();
        rows.swap(3, 17);
        let shuffled = d.select_rows(&rows);
        for model in [ModelSpec::linear()] {
            assert_abs_diff_eq!(
                empirical_m(&model, &d, &beta),
                empirical_m(&model, &shuffled, &beta),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn response_form_agrees_with_m_value() {
        let (d, beta) = random_instance(3, 20, 3);
        let eta = d.linear_predictor(&beta);
        let wp: Vec<f64> = (0..20).map(|i| (i % 3) as f64 * 0.7).collect();
        let wn: Vec<f64> = (0..20).map(|i| (i % 5) as f64 * 0.3).collect();
        let wl = ModelSpec::weighted_logistic(wp, wn).unwrap();
        let r = wl.response(&d);
        for i in 0..20 {
            assert_abs_diff_eq!(r.m(i, eta[i]), m_value(&wl, &d, &beta, i), epsilon = 1e-12);
        }
    }

    #[test]
    fn dataset_rejects_bad_input() {
        assert!(Dataset::from_rows(&[vec![1.0]], vec![1.0]).is_err());
        assert!(Dataset::from_rows(&[vec![f64::NAN], vec![1.0]], vec![1.0, 2.0]).is_err());
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(Dataset::with_parts(x.clone(), vec![0.0; 3], Some(vec![1.0, 0.0, -1.0]), None).is_err());
        assert!(Dataset::with_parts(x.clone(), vec![0.0; 3], None, Some(vec![0.0; 3])).is_err());
        assert!(Dataset::with_parts(x, vec![0.0; 3], Some(vec![1.0, -1.0, 1.0]), Some(vec![1.0, 0.0, 2.0])).is_ok());
    }

    #[test]
    fn model_spec_weight_rules() {
        let d = one_row(1.0, 1.0);
        assert!(ModelSpec::linear().validate(&d).is_ok());
        let wl = ModelSpec::weighted_logistic(vec![1.0], vec![1.0]).unwrap();
        assert!(wl.validate(&d).is_err());
        let bad = ModelSpec {
            family: Family::Linear,
            weights_pos: Some(vec![1.0, 1.0]),
            weights_neg: None,
        };
        assert!(bad.validate(&d).is_err());
        assert!(ModelSpec::weighted_logistic(vec![-1.0], vec![0.0]).is_err());
    }

    #[test]
    fn pinset_sorts_and_validates() {
        let pins = PinSet::new(vec![3, 1], vec![0.5, -1.0]).unwrap();
        assert_eq!(pins.indices(), &[1, 3]);
        assert_eq!(pins.values(), &[-1.0, 0.5]);
        assert_eq!(pins.get(3), Some(0.5));
        assert_eq!(pins.get(2), None);
        assert!(PinSet::new(vec![1, 1], vec![0.0, 0.0]).is_err());
        assert!(pins.validate(4).is_ok());
        assert!(pins.validate(3).is_err());
        assert!(PinSet::new(vec![0, 1], vec![0.0, 0.0]).unwrap().validate(2).is_ok());
    }
}
