//! File formats: JSON containers and CSV matrices. Every write goes to a
//! temporary file in the target directory and is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{GmcrError, Result};
use crate::numerics::Matrix;

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes `bytes` to `path` via write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = parent_dir(path);
    fs::create_dir_all(dir).map_err(|e| GmcrError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| GmcrError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| GmcrError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| GmcrError::io(path, e))?;
    tmp.persist(path).map_err(|e| GmcrError::io(path, e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GmcrError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GmcrError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Renders rows as CSV, with an optional header line.
pub fn matrix_to_csv(m: &Matrix, header: Option<&[String]>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| GmcrError::argument(format!("csv encoding: {e}"));
    if let Some(h) = header {
        if h.len() != m.ncols() {
            return Err(GmcrError::argument(format!(
                "header has {} labels for {} columns",
                h.len(),
                m.ncols()
            )));
        }
        w.write_record(h).map_err(to_err)?;
    }
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format_value(*v))).map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| GmcrError::argument(format!("csv encoding: {e}")))
}

/// Shortest round-trip representation; integral values print without a fraction.
pub fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn write_matrix_csv(path: &Path, m: &Matrix, header: Option<&[String]>) -> Result<()> {
    write_atomic(path, &matrix_to_csv(m, header)?)
}

/// Reads a numeric CSV. With `has_header` the first line is returned as labels.
pub fn read_matrix_csv(path: &Path, has_header: bool) -> Result<(Option<Vec<String>>, Matrix)> {
    let file = fs::File::open(path).map_err(|e| GmcrError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, message: String| GmcrError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = if has_header {
        let h = rdr
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        Some(h)
    } else {
        None
    };
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(rows + 1);
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(parse_err(line, format!("expected {c} fields, found {}", rec.len())))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.or(header.as_ref().map(Vec::len)).unwrap_or(0);
    let m = Matrix::from_shape_vec((rows, cols), values).map_err(|e| parse_err(0, e.to_string()))?;
    Ok((header, m))
}
