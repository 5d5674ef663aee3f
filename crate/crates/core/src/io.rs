//! Matrix CSV files: optional header row, one matrix row per line, values
//! written with 17 significant digits so a read after a write is bit-exact.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Formats a value with 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix, header: Option<&[String]>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if let Some(h) = header {
        if h.len() != m.cols() {
            return Err(Error::dim(format!(
                "{} header fields for {} columns",
                h.len(),
                m.cols()
            )));
        }
        w.write_record(h).map_err(csv_err)?;
    }
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|&v| format_value(v)))
            .map_err(csv_err)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// Reads a matrix CSV. A first line that does not parse as numbers is
/// treated as a header; any later unparsable field is an error naming the line.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    read_matrix_with_header(path).map(|(m, _)| m)
}

pub fn read_matrix_with_header(path: impl AsRef<Path>) -> Result<(Matrix, Option<Vec<String>>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header = None;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(idx + 1, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if idx == 0 => {
                header = Some(record.iter().map(String::from).collect::<Vec<_>>());
                cols = Some(record.len());
                continue;
            }
            Err(e) => return Err(parse_err(line, format!("invalid number: {e}"))),
        };
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(parse_err(line, format!("non-finite value in column {}", bad + 1)));
        }
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(parse_err(
                    line,
                    format!("expected {c} fields, found {}", values.len()),
                ))
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Ok((Matrix::from_vec(rows, cols, data)?, header))
}
