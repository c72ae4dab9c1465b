use std::collections::HashMap;
use std::path::Path;

use dpme_core::Dataset;
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// Which columns of the input file play which role.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub response: String,
    pub treatment: Option<String>,
    /// Covariate columns; `None` takes every other column.
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    /// Covariate names in column order.
    pub covariates: Vec<String>,
}

const MISSING: [&str; 6] = ["", "NA", "NaN", "nan", "NULL", "null"];
const MAX_LISTED: usize = 20;

fn is_missing(cell: &str) -> bool {
    MISSING.contains(&cell)
}

/// Reads a headed CSV file into a dataset.
///
/// Covariates keep their header order. Rows with missing cells are rejected
/// together, listing every offending line. Treatment may be coded `-1/+1` or
/// `0/1`.
pub fn ingest_csv(path: &Path, schema: &Schema, standardize: bool) -> CliResult<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(CliError::input(format!("{}: missing header row", path.display())));
    }

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (j, h) in headers.iter().enumerate() {
        if h.is_empty() {
            return Err(CliError::input(format!("{}: column {} has an empty name", path.display(), j + 1)));
        }
        if let Some(first) = seen.insert(h, j) {
            return Err(CliError::input(format!(
                "{}: duplicate column '{h}' at columns {} and {}",
                path.display(),
                first + 1,
                j + 1
            )));
        }
    }
    let locate = |name: &str, role: &str| {
        seen.get(name).copied().ok_or_else(|| {
            CliError::input(format!("{}: {role} column '{name}' is not in the header", path.display()))
        })
    };
    let y_col = locate(&schema.response, "response")?;
    let a_col = schema.treatment.as_deref().map(|t| locate(t, "treatment")).transpose()?;
    let x_cols: Vec<usize> = match &schema.covariates {
        Some(names) => {
            let mut cols = Vec::with_capacity(names.len());
            for name in names {
                let j = locate(name, "covariate")?;
                if j == y_col || Some(j) == a_col {
                    return Err(CliError::input(format!(
                        "column '{name}' cannot be both a covariate and the response or treatment"
                    )));
                }
                cols.push(j);
            }
            cols.sort_unstable();
            cols.dedup();
            cols
        }
        None => (0..headers.len()).filter(|&j| j != y_col && Some(j) != a_col).collect(),
    };
    if x_cols.is_empty() {
        return Err(CliError::input(format!("{}: no covariate columns", path.display())));
    }

    let mut used = vec![false; headers.len()];
    used[y_col] = true;
    for &j in x_cols.iter().chain(a_col.iter()) {
        used[j] = true;
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut missing: Vec<(u64, Vec<String>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(CliError::input(format!(
                "{}: line {line} has {} fields, expected {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        let gaps: Vec<String> = record
            .iter()
            .enumerate()
            .filter(|(j, cell)| used[*j] && is_missing(cell))
            .map(|(j, _)| headers[j].clone())
            .collect();
        if !gaps.is_empty() {
            missing.push((line, gaps));
            continue;
        }
        let cell = |j: usize| -> CliResult<f64> {
            let raw = &record[j];
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                CliError::input(format!(
                    "{}: line {line}, column '{}': '{raw}' is not a finite number",
                    path.display(),
                    headers[j]
                ))
            })
        };
        y.push(cell(y_col)?);
        if let Some(j) = a_col {
            let v = cell(j)?;
            let coded = if v == 1.0 {
                1.0
            } else if v == -1.0 || v == 0.0 {
                -1.0
            } else {
                return Err(CliError::input(format!(
                    "{}: line {line}, column '{}': treatment must be -1/+1 or 0/1, got {v}",
                    path.display(),
                    headers[j]
                )));
            };
            a.push(coded);
        }
        rows.push(x_cols.iter().map(|&j| cell(j)).collect::<CliResult<_>>()?);
    }
    if !missing.is_empty() {
        let listed: Vec<String> = missing
            .iter()
            .take(MAX_LISTED)
            .map(|(line, cols)| format!("line {line} ({})", cols.join(", ")))
            .collect();
        let more = if missing.len() > MAX_LISTED {
            format!(" and {} more", missing.len() - MAX_LISTED)
        } else {
            String::new()
        };
        return Err(CliError::input(format!(
            "{}: {} row(s) with missing values: {}{more}",
            path.display(),
            missing.len(),
            listed.join("; ")
        )));
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{}: no data rows", path.display())));
    }

    let n = rows.len();
    let x = DMatrix::from_fn(n, x_cols.len(), |i, j| rows[i][j]);
    let treatment = a_col.map(|_| a);
    let mut dataset = Dataset::with_parts(x, y, treatment, None)?;
    if standardize {
        dataset = dataset.standardized();
    }
    Ok(Ingested {
        dataset,
        covariates: x_cols.iter().map(|&j| headers[j].clone()).collect(),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        kind => CliError::input(format!("{}: {:?}", path.display(), kind)),
    }
}

/// Writes a dataset in the layout `ingest_csv` reads: covariates, then the
/// response, then the treatment if present.
pub fn write_dataset_csv(
    path: &Path,
    dataset: &Dataset,
    covariates: &[String],
    response: &str,
    treatment: Option<&str>,
) -> CliResult<()> {
    if covariates.len() != dataset.p() {
        return Err(CliError::input("covariate names do not match the dataset width"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = covariates.iter().map(String::as_str).collect();
    header.push(response);
    if let (Some(t), Some(_)) = (treatment, dataset.treatment()) {
        header.push(t);
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..dataset.n() {
        let mut row: Vec<String> = dataset.row(i).iter().map(|v| v.to_string()).collect();
        row.push(dataset.y()[i].to_string());
        if let (Some(_), Some(a)) = (treatment, dataset.treatment()) {
            row.push(a[i].to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
