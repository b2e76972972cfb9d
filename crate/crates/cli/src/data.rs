//! CSV ingestion: header-row CSV (RFC-4180 quoting) into a dataset, with a
//! configurable missing-value policy over the used columns only.

use ndarray::{Array1, Array2};
use std::path::Path;

use merit_core::{Dataset, Error, Result};

use crate::config::{DataConfig, MissingPolicy};

/// A loaded dataset plus bookkeeping the reports need.
#[derive(Debug)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// Error-free covariate names, in dataset column order.
    pub c_names: Vec<String>,
    /// Index of the time column within the error-free block, if configured.
    pub time_index: Option<usize>,
    pub dropped_rows: usize,
}

fn is_missing(token: &str) -> bool {
    matches!(token.trim(), "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL")
}

/// Loads a CSV into a dataset per the configured column roles.
///
/// The error-free block is ordered as configured; a configured time column
/// not already listed in `error_free` is appended to the block so that
/// instruments can reference it.
pub fn load_csv(path: &Path, config: &DataConfig) -> Result<LoadedData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::InvalidData(format!("cannot open '{}': {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::InvalidData(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidData(format!("missing column '{name}' in CSV header")))
    };

    let outcome_idx = find(&config.outcome)?;
    let exposure_idx = find(&config.exposure)?;
    let mut c_names: Vec<String> = config.error_free.clone();
    if let Some(t) = &config.time {
        if !c_names.contains(t) {
            c_names.push(t.clone());
        }
    }
    let c_idx: Vec<usize> = c_names.iter().map(|n| find(n)).collect::<Result<_>>()?;
    let x_idx: Vec<usize> = config
        .error_prone
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;
    let time_index = config
        .time
        .as_ref()
        .map(|t| c_names.iter().position(|n| n == t).unwrap());

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut c_rows: Vec<Vec<f64>> = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;

    let used: Vec<(usize, &str)> = {
        let mut v = vec![
            (outcome_idx, config.outcome.as_str()),
            (exposure_idx, config.exposure.as_str()),
        ];
        for (i, name) in c_idx.iter().zip(c_names.iter()) {
            v.push((*i, name.as_str()));
        }
        for (i, name) in x_idx.iter().zip(config.error_prone.iter()) {
            v.push((*i, name.as_str()));
        }
        v
    };

    for (row_number, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| Error::InvalidData(format!("CSV read error at row {}: {e}", row_number + 1)))?;
        // Parse all used cells, reporting the first offender.
        let mut parsed: Vec<f64> = Vec::with_capacity(used.len());
        let mut missing = false;
        for &(idx, name) in &used {
            let token = record.get(idx).unwrap_or("");
            match token.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => parsed.push(v),
                _ => {
                    if config.missing == MissingPolicy::DropRow {
                        missing = true;
                        break;
                    }
                    let what = if is_missing(token) { "missing value" } else { "cannot parse cell" };
                    return Err(Error::InvalidData(format!(
                        "{} at row {}, column '{}': '{}'",
                        what,
                        row_number + 1,
                        name,
                        token
                    )));
                }
            }
        }
        if missing {
            dropped += 1;
            continue;
        }
        y.push(parsed[0]);
        a.push(parsed[1]);
        c_rows.push(parsed[2..2 + c_idx.len()].to_vec());
        x_rows.push(parsed[2 + c_idx.len()..].to_vec());
    }

    let n = y.len();
    if n == 0 {
        return Err(Error::InvalidData(
            "no usable rows remain after applying the missing-value policy".into(),
        ));
    }
    let d_c = c_idx.len();
    let d_x = x_idx.len();
    let mut c = Array2::zeros((n, d_c));
    let mut x = Array2::zeros((n, d_x));
    for i in 0..n {
        for j in 0..d_c {
            c[[i, j]] = c_rows[i][j];
        }
        for j in 0..d_x {
            x[[i, j]] = x_rows[i][j];
        }
    }
    let dataset = Dataset::new(Array1::from(y), Array1::from(a), c, x)?;
    dataset.check_exposure(config.exposure_kind)?;
    Ok(LoadedData {
        dataset,
        c_names,
        time_index,
        dropped_rows: dropped,
    })
}

/// Writes a dataset back out as CSV with shortest-round-trip floats.
pub fn write_csv(path: &Path, data: &Dataset, config: &DataConfig) -> Result<()> {
    let mut out = String::new();
    out.push_str(&config.outcome);
    out.push(',');
    out.push_str(&config.exposure);
    let mut c_names = config.error_free.clone();
    if let Some(t) = &config.time {
        if !c_names.contains(t) {
            c_names.push(t.clone());
        }
    }
    for name in &c_names {
        out.push(',');
        out.push_str(name);
    }
    for name in &config.error_prone {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&format!("{},{}", data.y[i], data.a[i]));
        for j in 0..data.dim_c() {
            out.push_str(&format!(",{}", data.c[[i, j]]));
        }
        for j in 0..data.dim_x() {
            out.push_str(&format!(",{}", data.x[[i, j]]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::InvalidData(format!("cannot write '{}': {e}", path.display())))
}
