//! CSV interchange: header row, one record per subject, empty field = missing.

use std::path::Path;

use covmode::{Mask, Matrix};

use crate::error::{CliError, CliResult};

/// Numeric CSV contents with the missingness mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub values: Matrix,
    pub mask: Mask,
}

impl Table {
    pub fn column_index(&self, name: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Validation(format!("column `{name}` not found in {:?}", self.headers)))
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field, "" | "NA" | "NaN" | "nan")
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let headers: Vec<String> = rdr.headers().map_err(|e| CliError::io(path, e))?.iter().map(str::to_owned).collect();
    let p = headers.len();
    let mut data = Vec::new();
    let mut observed = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        if rec.len() != p {
            return Err(CliError::Validation(format!("{}: row {} has {} fields, expected {p}", path.display(), r + 1, rec.len())));
        }
        for field in rec.iter() {
            if is_missing(field) {
                data.push(0.0);
                observed.push(false);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    CliError::Validation(format!("{}: row {} has non-numeric field `{field}`", path.display(), r + 1))
                })?;
                data.push(v);
                observed.push(true);
            }
        }
    }
    let n = data.len() / p.max(1);
    Ok(Table { headers, values: Matrix::from_vec(n, p, data), mask: Mask::new(n, p, observed)? })
}

/// Writes `m`, leaving cells empty where `mask` marks them missing.
pub fn write_matrix(path: &Path, headers: &[String], m: &Matrix, mask: Option<&Mask>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(headers).map_err(|e| CliError::io(path, e))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| match mask {
                Some(mk) if !mk.is_observed(i, j) => String::new(),
                _ => fmt_f64(m[(i, j)]),
            })
            .collect();
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes the mask as 1 (observed) / 0 (missing).
pub fn write_mask(path: &Path, headers: &[String], mask: &Mask) -> CliResult<()> {
    let (n, p) = mask.shape();
    let m = Matrix::from_fn(n, p, |i, j| if mask.is_observed(i, j) { 1.0 } else { 0.0 });
    write_matrix(path, headers, &m, None)
}

pub fn read_mask(path: &Path) -> CliResult<(Vec<String>, Mask)> {
    let t = read_table(path)?;
    let (n, p) = t.values.shape();
    let mut observed = Vec::with_capacity(n * p);
    for &v in t.values.as_slice() {
        match v {
            1.0 => observed.push(true),
            0.0 => observed.push(false),
            other => return Err(CliError::Validation(format!("{}: mask entries must be 0 or 1, got {other}", path.display()))),
        }
    }
    Ok((t.headers, Mask::new(n, p, observed)?))
}

/// Default column names `y1, y2, …`.
pub fn default_headers(prefix: &str, p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("{prefix}{j}")).collect()
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
