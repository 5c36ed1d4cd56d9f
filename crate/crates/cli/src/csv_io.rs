//! Headered CSV input and output for datasets and predictions.

use std::path::Path;

use mfkrig::Dataset;
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult, ParseError};

/// A numeric table read from a CSV file with a mandatory header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn ncols(&self) -> usize {
        self.headers.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.ncols(), |i, j| self.rows[i][j])
    }
}

fn parse_error(path: &Path, row: usize, column: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        path: path.to_path_buf(),
        row,
        column,
        message: message.into(),
    }
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(format!("cannot open {}", path.display()), io),
            other => CliError::Parse(parse_error(path, 1, 1, format!("{other:?}"))),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(path, 1, 1, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(parse_error(path, 1, 1, "missing header row").into());
    }
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| parse_error(path, row, 1, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_error(
                path,
                row,
                record.len().min(headers.len()) + 1,
                format!("expected {} columns, found {}", headers.len(), record.len()),
            )
            .into());
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_error(
                    path,
                    row,
                    c + 1,
                    format!("'{cell}' is not a finite number"),
                )),
            })
            .collect::<Result<Vec<f64>, ParseError>>()?;
        rows.push(values);
    }
    Ok(Table { headers, rows })
}

/// Reads `D` input columns followed by one output column.
pub fn read_dataset(path: &Path, expected_dim: Option<usize>) -> CliResult<(Dataset, Vec<String>)> {
    let table = read_table(path)?;
    if table.ncols() < 2 {
        return Err(parse_error(
            path,
            1,
            table.ncols(),
            "need at least one input column and one output column",
        )
        .into());
    }
    let dim = table.ncols() - 1;
    if let Some(d) = expected_dim {
        if d != dim {
            return Err(parse_error(
                path,
                1,
                table.ncols(),
                format!(
                    "found {} columns, expected {} ({} inputs and one output)",
                    table.ncols(),
                    d + 1,
                    d
                ),
            )
            .into());
        }
    }
    let x = DMatrix::from_fn(table.rows.len(), dim, |i, j| table.rows[i][j]);
    let z = DVector::from_fn(table.rows.len(), |i, _| table.rows[i][dim]);
    let dataset = Dataset::new(x, z)?;
    Ok((dataset, table.headers[..dim].to_vec()))
}

/// Reads a table of inputs, checking its width against the model dimension.
pub fn read_inputs(path: &Path, dim: usize) -> CliResult<Table> {
    let table = read_table(path)?;
    if table.ncols() != dim {
        return Err(parse_error(
            path,
            1,
            table.ncols(),
            format!("found {} columns, the model expects {dim} inputs", table.ncols()),
        )
        .into());
    }
    Ok(table)
}

pub fn write_predictions(path: &Path, headers: &[String], x: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> CliResult<()> {
    let io = |e: csv::Error| CliError::io(format!("cannot write {}", path.display()), e.into());
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<&str> = headers.iter().map(String::as_str).collect();
    header.extend(["mean", "sd"]);
    writer.write_record(&header).map_err(io)?;
    for i in 0..x.nrows() {
        let mut record: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
        record.push(mean[i].to_string());
        record.push(sd[i].to_string());
        writer.write_record(&record).map_err(io)?;
    }
    writer
        .flush()
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}
