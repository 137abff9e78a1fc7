//! File formats: square matrices with a `d=<int>` header line, numeric series
//! tables, and label sequences.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use simdiag::linalg::Mat;

use crate::CliError;

fn input_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {msg}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| input_err(path, e))
}

fn numeric_records(path: &Path, text: &str) -> Result<Vec<Vec<String>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn parse_row(path: &Path, line: usize, row: &[String]) -> Result<Vec<f64>, CliError> {
    row.iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| input_err(path, format!("row {line}: `{f}` is not a finite number")))
        })
        .collect()
}

/// Reads a `d=<int>` headed square matrix.
pub fn read_matrix(path: &Path) -> Result<Mat, CliError> {
    let text = read_text(path)?;
    let (header, body) = text.split_once('\n').unwrap_or((&text, ""));
    let d: usize = header
        .trim()
        .strip_prefix("d=")
        .and_then(|s| s.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| input_err(path, "first line must be `d=<positive int>`"))?;
    let rows = numeric_records(path, body)?;
    if rows.len() != d {
        return Err(input_err(
            path,
            format!("expected {d} rows, found {}", rows.len()),
        ));
    }
    let mut m = Mat::zeros(d, d);
    for (i, row) in rows.iter().enumerate() {
        let vals = parse_row(path, i + 2, row)?;
        if vals.len() != d {
            return Err(input_err(
                path,
                format!("row {} has {} values, expected {d}", i + 2, vals.len()),
            ));
        }
        for (j, v) in vals.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
pub fn write_matrix(path: &Path, m: &Mat) -> Result<(), CliError> {
    let mut out = format!("d={}\n", m.nrows());
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| input_err(path, e))
}

/// Reads a numeric table with one row per time point. A non-numeric first row
/// is taken as a header and skipped.
pub fn read_series(path: &Path) -> Result<Mat, CliError> {
    let text = read_text(path)?;
    let mut rows = numeric_records(path, &text)?;
    if let Some(first) = rows.first() {
        if first.iter().any(|f| f.parse::<f64>().is_err()) {
            rows.remove(0);
        }
    }
    if rows.is_empty() {
        return Err(input_err(path, "no data rows"));
    }
    let cols = rows[0].len();
    let mut m = Mat::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        let vals = parse_row(path, i + 1, row)?;
        if vals.len() != cols {
            return Err(input_err(
                path,
                format!("row {} has {} values, expected {cols}", i + 1, vals.len()),
            ));
        }
        for (j, v) in vals.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

pub fn write_series(path: &Path, m: &Mat) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| input_err(path, e))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|x| format!("{x:e}")))
            .map_err(|e| input_err(path, e))?;
    }
    w.flush().map_err(|e| input_err(path, e))
}

/// First column of a one-value-per-line file.
pub fn read_column(path: &Path) -> Result<Vec<f64>, CliError> {
    let series = read_series(path)?;
    Ok(series.column(0).iter().copied().collect())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>, CliError> {
    read_column(path)?
        .into_iter()
        .map(|x| {
            if x >= 1.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(input_err(path, format!("label {x} is not a positive integer")))
            }
        })
        .collect()
}

/// Linearly interpolated sample quantile, `0 <= q <= 1`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Thresholds at the given probability levels of the pooled values.
pub fn quantile_thresholds(values: &[f64], levels: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    levels.iter().map(|&q| quantile(&sorted, q)).collect()
}

/// State `1 + #{j : x > t_j}` for increasing thresholds `t`.
pub fn discretize(values: &[f64], thresholds: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|&x| 1 + thresholds.iter().filter(|&&t| x > t).count())
        .collect()
}

/// Sample files of a directory, in file-name order.
pub fn sample_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| input_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// SHA-256 over the contents of the given files, directories expanded in
/// file-name order.
pub fn digest_files(paths: &[PathBuf]) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    for p in paths {
        let files = if p.is_dir() {
            sample_files(p)?
        } else {
            vec![p.clone()]
        };
        for f in files {
            hasher.update(fs::read(&f).map_err(|e| input_err(&f, e))?);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
