use std::fs;
use std::path::{Path, PathBuf};

use dpme_cli::commands::{FIT_HEADER, ITR_HEADER};
use dpme_cli::config::{Cli, RunConfig, Settings, TargetKey};
use dpme_cli::error::{EXIT_INPUT, EXIT_OK};
use dpme_cli::ingest::{ingest_csv, write_dataset_csv, Schema};
use dpme_core::itr::{fit_itr_dpme, ItrConfig};
use dpme_core::simbench::{gen_itr, gen_linear, replicate_rng, CovariateScale};
use dpme_core::Dataset;
use clap::Parser;
use nalgebra::{DMatrix, DVector};
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["dpme", "--threads", "1"];
    full.extend_from_slice(args);
    dpme_cli::run(full)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn schema(treatment: Option<&str>) -> Schema {
    Schema {
        response: "y".into(),
        treatment: treatment.map(str::to_string),
        covariates: None,
    }
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

fn write_linear(dir: &Path, n: usize, p: usize, seed: u64) -> PathBuf {
    let data = gen_linear(n, p, CovariateScale::Standardized, &mut replicate_rng(seed, 0)).unwrap();
    let path = dir.join("linear.csv");
    write_dataset_csv(&path, &data, &names(p), "y", None).unwrap();
    path
}

fn write_itr(dir: &Path, n: usize, p: usize, seed: u64) -> (PathBuf, Dataset) {
    let sample = gen_itr(n, p, &mut replicate_rng(seed, 0)).unwrap();
    let path = dir.join("itr.csv");
    write_dataset_csv(&path, &sample.data, &names(p), "y", Some("a")).unwrap();
    (path, sample.data)
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn ingest_err(dir: &Path, contents: &str, schema: &Schema) -> String {
    let path = dir.join("bad.csv");
    fs::write(&path, contents).unwrap();
    ingest_csv(&path, schema, false).unwrap_err().to_string()
}

#[test]
fn small_file_gives_one_covariate() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x,y\n1,2\n3,4\n5,6\n").unwrap();
    let d = ingest_csv(&path, &schema(None), false).unwrap();
    assert_eq!((d.dataset.n(), d.dataset.p()), (3, 1));
    assert_eq!(d.dataset.y(), &[2.0, 4.0, 6.0]);
    assert_eq!(d.dataset.column(0), &[1.0, 3.0, 5.0]);
    assert_eq!(d.covariates, vec!["x"]);
}

#[test]
fn columns_follow_header_order() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "b,y,a\n1,2,3\n4,5,6\n").unwrap();
    let s = Schema {
        response: "y".into(),
        treatment: None,
        covariates: Some(vec!["a".into(), "b".into()]),
    };
    let d = ingest_csv(&path, &s, false).unwrap();
    assert_eq!(d.covariates, vec!["b", "a"]);
    assert_eq!(d.dataset.column(1), &[3.0, 6.0]);
}

#[test]
fn missing_cells_are_reported_by_line_and_column() {
    let dir = TempDir::new().unwrap();
    let msg = ingest_err(dir.path(), "x1,x2,y\n1,2,3\n4,NA,6\n7,8,\n", &schema(None));
    assert!(msg.contains("2 row(s)"), "{msg}");
    assert!(msg.contains("line 3 (x2)"), "{msg}");
    assert!(msg.contains("line 4 (y)"), "{msg}");
}

#[test]
fn malformed_files_name_the_location() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let msg = ingest_err(d, "x,x,y\n1,2,3\n", &schema(None));
    assert!(msg.contains("duplicate column 'x'") && msg.contains("columns 1 and 2"), "{msg}");
    let msg = ingest_err(d, "x,y\n1,2\n3\n", &schema(None));
    assert!(msg.contains("line 3 has 1 fields, expected 2"), "{msg}");
    let msg = ingest_err(d, "x,y\n1,2\nabc,3\n", &schema(None));
    assert!(msg.contains("line 3, column 'x'") && msg.contains("'abc'"), "{msg}");
    let msg = ingest_err(d, "x,y\n1,2\ninf,3\n", &schema(None));
    assert!(msg.contains("not a finite number"), "{msg}");
    let msg = ingest_err(d, "x,resp\n1,2\n", &schema(None));
    assert!(msg.contains("response column 'y'"), "{msg}");
    let msg = ingest_err(d, "x,y\n1,2\n", &schema(Some("trt")));
    assert!(msg.contains("treatment column 'trt'"), "{msg}");
    let msg = ingest_err(d, "x,y,a\n1,2,3\n", &schema(Some("a")));
    assert!(msg.contains("treatment must be -1/+1 or 0/1"), "{msg}");
}

#[test]
fn zero_one_treatment_is_recoded() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x,y,a\n1,2,0\n3,4,1\n5,6,-1\n").unwrap();
    let d = ingest_csv(&path, &schema(Some("a")), false).unwrap();
    assert_eq!(d.dataset.treatment().unwrap(), &[-1.0, 1.0, -1.0]);
    assert_eq!(d.dataset.p(), 1);
}

#[test]
fn standardize_flag_zscores_columns() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x,y\n1,0\n2,0\n6,1\n").unwrap();
    let d = ingest_csv(&path, &schema(None), true).unwrap();
    let col = d.dataset.column(0);
    let mean = col.iter().sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = TempDir::new().unwrap();
    let (path, data) = write_itr(dir.path(), 50, 6, 3);
    let back = ingest_csv(&path, &schema(Some("a")), false).unwrap().dataset;
    let gap = (data.x() - back.x()).amax();
    assert!(gap <= 1e-15, "{gap}");
    for (u, v) in data.y().iter().zip(back.y()) {
        assert!((u - v).abs() <= 1e-15);
    }
    assert_eq!(data.treatment(), back.treatment());
}

#[test]
fn fit_without_penalty_recovers_least_squares() {
    let dir = TempDir::new().unwrap();
    let input = write_linear(dir.path(), 80, 4, 11);
    let out = dir.path().join("fit");
    assert_eq!(
        run(&["fit", "-i", p(&input), "-o", p(&out), "--lambda", "0", "--targets", "0"]),
        EXIT_OK
    );
    let data = ingest_csv(&input, &schema(None), false).unwrap().dataset;
    let x = data.x();
    let y = DVector::from_column_slice(data.y());
    let ols = (x.transpose() * x).lu().solve(&(x.transpose() * y)).unwrap();

    let (header, rows) = read_table(&out.with_extension("csv"));
    assert_eq!(header, FIT_HEADER);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "x0");
    let theta: f64 = rows[0][2].parse().unwrap();
    assert!((theta - ols[0]).abs() < 1e-6, "{theta} vs {}", ols[0]);
}

#[test]
fn intervals_use_the_normal_quantile() {
    let dir = TempDir::new().unwrap();
    let input = write_linear(dir.path(), 120, 8, 5);
    let out = dir.path().join("fit.csv");
    assert_eq!(
        run(&["fit", "-i", p(&input), "-o", p(&out), "--targets", "x0,x5", "--alpha", "0.05"]),
        EXIT_OK
    );
    let (_, rows) = read_table(&out);
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let v: Vec<f64> = row[1..].iter().map(|c| c.parse().unwrap()).collect();
        let (theta, se, lo, hi, pv) = (v[1], v[2], v[3], v[4], v[5]);
        assert!(((hi - lo) / 2.0 - 1.959964 * se).abs() < 1e-6);
        assert!(((hi + lo) / 2.0 - theta).abs() < 1e-12);
        assert!(pv > 0.0 || theta.abs() / se > 8.0);
        assert!(pv <= 1.0);
    }
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    let fits = sidecar["fits"].as_array().unwrap();
    assert_eq!(fits.len(), 2);
    for key in ["lambda", "h1", "h2", "initial_iterations", "profile_fits", "cache_hits"] {
        assert!(fits[0].get(key).is_some(), "missing {key}");
    }
    assert!(out.with_extension("log").is_file());
    assert!(!sidecar.to_string().contains(dir.path().to_str().unwrap()));
}

#[test]
fn joint_fit_reports_every_target() {
    let dir = TempDir::new().unwrap();
    let input = write_linear(dir.path(), 120, 8, 6);
    let out = dir.path().join("joint");
    assert_eq!(
        run(&["fit", "-i", p(&input), "-o", p(&out), "--targets", "0,5", "--joint", "--intercept"]),
        EXIT_OK
    );
    let (_, rows) = read_table(&out.with_extension("csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["x0", "x5"]);
}

#[test]
fn treatment_rule_fit_needs_a_treatment_column() {
    let dir = TempDir::new().unwrap();
    let input = write_linear(dir.path(), 40, 4, 1);
    let out = dir.path().join("itr");
    assert_eq!(run(&["fit", "-i", p(&input), "-o", p(&out), "--family", "itr"]), EXIT_INPUT);
    assert_eq!(run(&["itr", "-i", p(&input), "-o", p(&out)]), EXIT_INPUT);
}

#[test]
fn invalid_settings_exit_with_input_error() {
    let dir = TempDir::new().unwrap();
    let input = write_linear(dir.path(), 40, 4, 1);
    let out = dir.path().join("o");
    let i = p(&input);
    let o = p(&out);
    assert_eq!(run(&["simulate", "--reps", "0", "-o", o]), EXIT_INPUT);
    assert_eq!(run(&["simulate", "--p", "10", "--reps", "1", "-o", o]), EXIT_INPUT);
    assert_eq!(run(&["fit", "-i", i, "-o", o, "--alpha", "0.5"]), EXIT_INPUT);
    assert_eq!(run(&["fit", "-i", i, "-o", o, "--targets", "x9"]), EXIT_INPUT);
    assert_eq!(run(&["fit", "-i", i, "-o", o, "--targets", "7"]), EXIT_INPUT);
    assert_eq!(run(&["fit", "-i", "/nonexistent/in.csv", "-o", o]), EXIT_INPUT);
    assert_eq!(run(&["fit", "-i", i, "-o", "/nonexistent/dir/out"]), EXIT_INPUT);
    assert_eq!(run(&["fit", "-i", i]), EXIT_INPUT);
    assert_eq!(run(&["fit", "--bogus"]), EXIT_INPUT);
    assert_eq!(run(&["--help"]), EXIT_OK);
    assert!(!out.with_extension("csv").exists());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "output = \"from-file\"\nalpha = 0.1\nreps = 3\ntargets = [0, 4]\nscenario = \"logistic\"\ncurvature_correction = false\n",
    )
    .unwrap();
    let cli = Cli::try_parse_from(["dpme", "--config", p(&cfg), "simulate", "--reps", "9", "-o", "out.csv"]).unwrap();
    let c = RunConfig::resolve(&cli).unwrap();
    assert_eq!(c.reps, 9);
    assert_eq!(c.alpha, 0.1);
    assert_eq!(c.output, PathBuf::from("out"));
    assert_eq!(c.output_file("json"), PathBuf::from("out.json"));
    assert_eq!(c.targets, Some(vec![TargetKey::Index(0), TargetKey::Index(4)]));
    assert!(!c.curvature_correction);

    fs::write(&cfg, "reps = 3\nrepz = 4\n").unwrap();
    assert!(Settings::from_file(&cfg).is_err());
    assert_eq!(run(&["--config", p(&cfg), "simulate", "-o", "x"]), EXIT_INPUT);
}

#[test]
fn simulate_is_byte_for_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |o: &Path| {
        vec!["simulate", "--scenario", "linear", "--n", "200", "--p", "100", "--reps", "20", "--seed", "7", "-o"]
            .into_iter()
            .map(str::to_string)
            .chain([p(o).to_string()])
            .collect::<Vec<_>>()
    };
    let call = |o: &Path| {
        let v = args(o);
        run(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(call(&a), EXIT_OK);
    assert_eq!(call(&b), EXIT_OK);
    for ext in ["csv", "json"] {
        let x = fs::read(a.with_extension(ext)).unwrap();
        let y = fs::read(b.with_extension(ext)).unwrap();
        assert_eq!(x, y, "{ext} differs");
    }
    let (header, rows) = read_table(&a.with_extension("csv"));
    assert_eq!(
        header,
        ["scenario", "n", "p", "reps", "target", "truth", "bias", "sd", "se", "cp95", "cp90", "completed", "dropped"]
    );
    assert_eq!(rows.len(), 2);
}

#[test]
fn report_reproduces_the_simulation_table() {
    let dir = TempDir::new().unwrap();
    let sim = dir.path().join("sim");
    assert_eq!(
        run(&["simulate", "--scenario", "logistic", "--n", "150", "--p", "12", "--reps", "4", "--seed", "3", "-o", p(&sim)]),
        EXIT_OK
    );
    let rep = dir.path().join("rep");
    assert_eq!(run(&["report", "-i", p(&sim.with_extension("json")), "-o", p(&rep)]), EXIT_OK);
    assert_eq!(
        fs::read(sim.with_extension("csv")).unwrap(),
        fs::read(rep.with_extension("csv")).unwrap()
    );
    let junk = dir.path().join("junk.json");
    fs::write(&junk, "{\"not\": 1}").unwrap();
    assert_eq!(run(&["report", "-i", p(&junk), "-o", p(&rep)]), EXIT_INPUT);
}

#[test]
fn treatment_rule_simulation_emits_coverage_columns() {
    let dir = TempDir::new().unwrap();
    let sim = dir.path().join("itr");
    let cache = dir.path().join("truth");
    assert_eq!(
        run(&[
            "simulate", "--scenario", "itr", "--n", "300", "--p", "8", "--reps", "2", "--seed", "1", "--truth-mc",
            "20000", "--truth-cache", p(&cache), "-o", p(&sim),
        ]),
        EXIT_OK
    );
    let (header, rows) = read_table(&sim.with_extension("csv"));
    assert!(header.contains(&"cp95".to_string()) && header.contains(&"cp90".to_string()));
    assert_eq!(rows.len(), 2);
    assert!(fs::read_dir(&cache).unwrap().count() > 0);
}

#[test]
fn treatment_rule_table_covers_every_covariate() {
    let dir = TempDir::new().unwrap();
    let (input, _) = write_itr(dir.path(), 478, 35, 21);
    let out = dir.path().join("genes");
    assert_eq!(run(&["itr", "-i", p(&input), "-o", p(&out)]), EXIT_OK);
    let (header, rows) = read_table(&out.with_extension("csv"));
    assert_eq!(header, ITR_HEADER);
    assert_eq!(rows.len(), 35);
    let pv: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(pv.iter().all(|&v| v > 0.0 && v <= 1.0));
    assert!(pv.windows(2).all(|w| w[0] <= w[1]));
    let mut seen: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 35);
}

#[test]
fn single_repeat_matches_one_cross_fit() {
    let dir = TempDir::new().unwrap();
    let (input, data) = write_itr(dir.path(), 300, 6, 8);
    let out = dir.path().join("one");
    assert_eq!(run(&["itr", "-i", p(&input), "-o", p(&out), "--repeats", "1", "--seed", "4"]), EXIT_OK);
    let mut config = ItrConfig::default();
    config.dpme.solver.seed = 4;
    let direct = fit_itr_dpme(&data, &(0..6).collect::<Vec<_>>(), 4, &config).unwrap();
    let (_, rows) = read_table(&out.with_extension("csv"));
    for row in rows {
        let j: usize = row[0][1..].parse().unwrap();
        let est: f64 = row[1].parse().unwrap();
        let se: f64 = row[2].parse().unwrap();
        assert_eq!(est, direct.theta[j]);
        assert_eq!(se, direct.se[j]);
    }
}

#[test]
fn duplicated_covariate_is_pruned_and_logged() {
    let dir = TempDir::new().unwrap();
    let sample = gen_itr(300, 6, &mut replicate_rng(13, 0)).unwrap();
    let data = &sample.data;
    let x = DMatrix::from_fn(data.n(), 7, |i, j| data.x()[(i, if j == 6 { 2 } else { j })]);
    let with_copy = Dataset::with_parts(x, data.y().to_vec(), data.treatment().map(<[f64]>::to_vec), None).unwrap();
    let mut cols = names(6);
    cols.push("x2_copy".into());
    let input = dir.path().join("dup.csv");
    write_dataset_csv(&input, &with_copy, &cols, "y", Some("a")).unwrap();

    let out = dir.path().join("pruned");
    assert_eq!(run(&["itr", "-i", p(&input), "-o", p(&out), "--repeats", "2"]), EXIT_OK);
    let (_, rows) = read_table(&out.with_extension("csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[0] != "x2_copy"));
    let log = fs::read_to_string(out.with_extension("log")).unwrap();
    assert!(log.contains("x2_copy"), "{log}");
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["pruned"], serde_json::json!(["x2_copy"]));
}
