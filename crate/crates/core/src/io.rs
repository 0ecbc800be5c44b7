//! Dataset and result file formats.
//!
//! Function files are CSV with a header `t,<name1>,...,<nameN>`: the first
//! column is an equally spaced time grid, one further column per function.
//! Floats are written with 17 significant digits so files round-trip
//! bitwise.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::GroupAssignment;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::Dataset;

const SPACING_TOL: f64 = 1e-9;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, row: usize, column: usize, reason: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), row, column, reason: reason.into() }
}

/// Reads a function file. Rows and columns in errors are 1-based and count
/// the header as row 1.
pub fn load_functions_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 3 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected a time column and at least two functions, found {} columns", header.len()),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let width = header.len();
    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record?;
        if record.len() != width {
            return Err(parse_err(path, row, record.len().min(width) + 1, format!("expected {width} fields, found {}", record.len())));
        }
        let mut values = Vec::with_capacity(width - 1);
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| parse_err(path, row, c + 1, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, row, c + 1, format!("non-finite value `{field}`")));
            }
            if c == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
        rows.push(values);
    }
    let p = times.len();
    if p < 4 {
        return Err(Error::Format { path: path.display().to_string(), reason: format!("need at least 4 time points, found {p}") });
    }
    let dt = (times[p - 1] - times[0]) / (p - 1) as f64;
    if dt <= 0.0 {
        return Err(parse_err(path, p + 1, 1, "time grid must be increasing"));
    }
    for j in 0..p {
        let expected = times[0] + j as f64 * dt;
        if (times[j] - expected).abs() > SPACING_TOL * dt.abs() * (p as f64) {
            return Err(parse_err(path, j + 2, 1, format!("time {} breaks the equal spacing {dt}", times[j])));
        }
    }
    let grid = TimeGrid::new(times[0], times[p - 1], p)?;
    let values = DMatrix::from_fn(p, names.len(), |j, i| rows[j][i]);
    Dataset::with_names(grid, values, names)
}

/// Writes curves sampled on `grid`, one column per function.
pub fn save_functions_csv(path: &Path, grid: &TimeGrid, values: &DMatrix<f64>, names: &[String]) -> Result<()> {
    if values.nrows() != grid.len() || values.ncols() != names.len() {
        return Err(Error::ShapeMismatch("values must be p x N with one name per column".into()));
    }
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    let rows = (0..grid.len()).map(|j| {
        let mut row = vec![grid.points()[j]];
        row.extend(values.row(j).iter());
        row
    });
    write_rows(path, &header, rows)
}

pub fn save_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    save_functions_csv(path, &data.grid, &data.values, &data.names)
}

/// Writes a numeric table under a header.
pub fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// `function_id,label,z1,z2,z1_centered,z2_centered`.
pub fn save_groups_csv(path: &Path, names: &[String], groups: &GroupAssignment, z1: &[f64], z2: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["function_id", "label", "z1", "z2", "z1_centered", "z2_centered"])?;
    for (i, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            groups.labels[i].to_string(),
            fmt_f64(z1[i]),
            fmt_f64(z2[i]),
            groups.rule.z1_centered.to_string(),
            groups.rule.z2_centered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the labels column of a groups file, in file order.
pub fn load_group_labels(path: &Path) -> Result<Vec<u8>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let col = header.iter().position(|h| h == "label").ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "no `label` column".into(),
    })?;
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let field = record.get(col).unwrap_or("");
        labels.push(field.parse().map_err(|_| parse_err(path, k + 2, col + 1, format!("`{field}` is not a group label")))?);
    }
    Ok(labels)
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sls: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sls_grouped: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canonical_correlations: Option<[f64; 2]>,
    #[serde(default)]
    pub criterion_trace: Vec<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
