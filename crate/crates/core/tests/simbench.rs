use dpme_core::model::sigmoid;
use dpme_core::simbench::{
    aggregate, gen_blocked_covariates, gen_itr, gen_linear, gen_logistic, replicate_rng, run_scenario, true_beta_itr,
    CovariateScale, ReplicateRecord, Scenario, ScenarioKind, SimConfig,
};
use nalgebra::{DMatrix, DVector};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    c / (va * vb).sqrt()
}

fn column(x: &DMatrix<f64>, j: usize) -> Vec<f64> {
    x.column(j).iter().copied().collect()
}

#[test]
fn blocked_covariates_have_the_stated_moments() {
    let x = gen_blocked_covariates(100_000, 8, &mut replicate_rng(1, 0)).unwrap();
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    for j in 0..8 {
        let c = column(&x, j);
        let m = c.iter().sum::<f64>() / c.len() as f64;
        let v = c.iter().map(|z| (z - m).powi(2)).sum::<f64>() / c.len() as f64;
        assert!((m - 0.5).abs() < 0.005);
        assert!((v - 1.0 / 24.0).abs() < 0.001, "variance {v}");
    }
    for (a, b) in [(0, 1), (0, 3), (2, 3), (4, 7), (5, 6)] {
        let r = corr(&column(&x, a), &column(&x, b));
        assert!((r - 0.5).abs() < 0.02, "within-block {a},{b}: {r}");
    }
    for (a, b) in [(0, 4), (1, 5), (3, 7), (2, 6)] {
        let r = corr(&column(&x, a), &column(&x, b));
        assert!(r.abs() < 0.02, "cross-block {a},{b}: {r}");
    }
}

#[test]
fn linear_design_recovers_its_coefficients() {
    let d = gen_linear(100_000, 8, CovariateScale::Standardized, &mut replicate_rng(2, 0)).unwrap();
    let x = d.x();
    let y = DVector::from_column_slice(d.y());
    let beta = (x.transpose() * x).lu().solve(&(x.transpose() * &y)).unwrap();
    for j in 0..8 {
        let truth = if j < 5 { 1.0 } else { 0.0 };
        assert!((beta[j] - truth).abs() < 0.03, "coefficient {j}: {}", beta[j]);
    }
    let resid = &y - x * &beta;
    let s2 = resid.norm_squared() / (d.n() - 8) as f64;
    assert!((s2 - 1.0).abs() < 0.02, "residual variance {s2}");
}

#[test]
fn raw_linear_mean_is_two_and_a_half() {
    let d = gen_linear(100_000, 8, CovariateScale::Raw, &mut replicate_rng(3, 0)).unwrap();
    let mean = d.y().iter().sum::<f64>() / d.n() as f64;
    assert!((mean - 2.5).abs() < 0.02, "mean {mean}");
}

#[test]
fn logistic_mean_matches_nested_monte_carlo() {
    let d = gen_logistic(100_000, 8, CovariateScale::Standardized, &mut replicate_rng(4, 0)).unwrap();
    assert!(d.y().iter().all(|&v| v == 0.0 || v == 1.0));
    let mean = d.y().iter().sum::<f64>() / d.n() as f64;
    let x = gen_blocked_covariates(1_000_000, 8, &mut replicate_rng(4, 1)).unwrap();
    let sd = (1.0f64 / 24.0).sqrt();
    let expected = (0..x.nrows())
        .map(|i| sigmoid((0..5).map(|j| (x[(i, j)] - 0.5) / sd).sum()))
        .sum::<f64>()
        / x.nrows() as f64;
    assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
}

#[test]
fn treatment_rule_design_properties() {
    let s = gen_itr(100_000, 6, &mut replicate_rng(5, 0)).unwrap();
    let a = s.data.treatment().unwrap();
    let mean_a = a.iter().sum::<f64>() / a.len() as f64;
    assert!(mean_a.abs() < 0.01, "E[A] {mean_a}");
    for i in 0..s.data.n() {
        assert!((s.y_pos[i] - s.y_neg[i] - 2.0 * s.delta[i]).abs() <= 1e-12 * (1.0 + s.delta[i].abs()));
        let observed = if a[i] > 0.0 { s.y_pos[i] } else { s.y_neg[i] };
        assert_eq!(s.data.y()[i], observed);
        assert!(s.propensity[i] > 0.0 && s.propensity[i] < 1.0);
    }

    let big = gen_itr(1_000_000, 4, &mut replicate_rng(6, 0)).unwrap();
    let mean_abs = big.delta.iter().map(|d| d.abs()).sum::<f64>() / big.delta.len() as f64;
    let optimum = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mean_abs - optimum).abs() < 0.01, "{mean_abs}");
}

#[test]
fn surrogate_truth_is_sparse_signed_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = true_beta_itr(10, 1_000_000, 11, Some(dir.path())).unwrap();
    let b = true_beta_itr(10, 1_000_000, 12, None).unwrap();
    assert_eq!(a.normalized[2], 1.0);
    for t in [&a, &b] {
        let signs: Vec<bool> = t.normalized[..4].iter().map(|v| *v > 0.0).collect();
        assert_eq!(signs, vec![false, false, true, true]);
        assert!(t.normalized[4..].iter().all(|v| v.abs() < 0.02), "{:?}", t.normalized);
    }
    let gap = a.normalized.iter().zip(&b.normalized).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap < 0.01, "seed gap {gap}");

    let cached = true_beta_itr(10, 1_000_000, 11, Some(dir.path())).unwrap();
    assert_eq!(cached, a);
    assert!(true_beta_itr(3, 1000, 1, None).is_err());
}

fn small(kind: ScenarioKind, reps: usize) -> Scenario {
    let p = if kind == ScenarioKind::Itr { 10 } else { 12 };
    Scenario {
        truth_mc_size: 100_000,
        ..Scenario::new(kind, 200, p, reps, 9)
    }
}

#[test]
fn single_replicate_has_no_sd() {
    let report = run_scenario(&small(ScenarioKind::Linear, 1), &SimConfig::default()).unwrap();
    assert_eq!(report.completed, 1);
    for s in &report.summaries {
        assert!(s.sd.is_none());
        assert!(s.coverage.iter().all(|&c| c == 0.0 || c == 1.0));
    }
    let csv = report.to_csv().unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[7], "");
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn reaggregate(records: &[ReplicateRecord], t: usize) -> (f64, f64, f64, Vec<f64>) {
    let ok: Vec<_> = records.iter().filter(|r| r.error.is_none()).map(|r| &r.targets[t]).collect();
    let m = ok.len() as f64;
    let mut bias: Vec<f64> = ok.iter().map(|r| r.estimate - r.truth).collect();
    let mut se: Vec<f64> = ok.iter().map(|r| r.se).collect();
    let mean = ok.iter().map(|r| r.estimate).sum::<f64>() / m;
    let sd = (ok.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let cov = (0..2).map(|a| ok.iter().filter(|r| r.covered[a]).count() as f64 / m).collect();
    (median(&mut bias), sd, median(&mut se), cov)
}

#[test]
fn audit_records_reproduce_the_aggregates() {
    for kind in [ScenarioKind::Linear, ScenarioKind::Logistic, ScenarioKind::Itr] {
        let scenario = small(kind, 8);
        let report = run_scenario(&scenario, &SimConfig::default()).unwrap();
        assert_eq!(report.completed + report.dropped, 8);
        assert_eq!(aggregate(&scenario, &report.records), report.summaries);
        for (t, s) in report.summaries.iter().enumerate() {
            let (bias, sd, se, cov) = reaggregate(&report.records, t);
            assert!((s.median_bias - bias).abs() < 1e-12);
            assert!((s.sd.unwrap() - sd).abs() < 1e-12);
            assert!((s.median_se - se).abs() < 1e-12);
            assert_eq!(s.coverage, cov);
            assert!(s.coverage[0] >= s.coverage[1], "{kind}: CP95 below CP90");
            assert!(s.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        for r in report.records.iter().filter(|r| r.error.is_none()) {
            for t in &r.targets {
                assert!(!t.covered[1] || t.covered[0]);
            }
        }
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let scenario = small(ScenarioKind::Logistic, 4);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let r = pool.install(|| run_scenario(&scenario, &SimConfig::default())).unwrap();
        (r.to_csv().unwrap(), r.to_json().unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}

#[test]
fn csv_header_is_stable() {
    let report = run_scenario(&small(ScenarioKind::Linear, 2), &SimConfig::default()).unwrap();
    let csv = report.to_csv().unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "scenario,n,p,reps,target,truth,bias,sd,se,cp95,cp90,completed,dropped"
    );
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("linear,200,12,2,0,1,"));
}

#[test]
fn invalid_scenarios_are_rejected() {
    assert!(run_scenario(&small(ScenarioKind::Linear, 0), &SimConfig::default()).is_err());
    let mut s = small(ScenarioKind::Linear, 1);
    s.p = 10;
    assert!(run_scenario(&s, &SimConfig::default()).is_err());
    s.p = 12;
    s.targets = vec![12];
    assert!(run_scenario(&s, &SimConfig::default()).is_err());
}
