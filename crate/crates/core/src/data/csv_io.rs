use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{GmfError, Result};
use crate::scalar::Scalar;

/// Reads a numeric CSV matrix. Cells equal to `na_token` (or empty) are
/// missing: they are zero-filled and their mask bit is cleared. A first row
/// that is not numeric is treated as a header and skipped.
pub fn load_csv_matrix<T: Scalar>(path: impl AsRef<Path>, na_token: &str) -> Result<(Array2<T>, Array2<bool>)> {
    let file = File::open(path.as_ref())?;
    parse_csv_matrix(file, na_token)
}

/// Same as [`load_csv_matrix`] over any reader.
pub fn parse_csv_matrix<T: Scalar, R: Read>(reader: R, na_token: &str) -> Result<(Array2<T>, Array2<bool>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let is_missing = |s: &str| s.is_empty() || s == na_token;
    let mut values: Vec<T> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0usize;

    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = idx + 1;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if idx == 0 && record.iter().any(|c| !is_missing(c) && c.parse::<f64>().is_err()) {
            // header row
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(GmfError::Parse {
                    row: line,
                    msg: format!("expected {w} fields, found {}", record.len()),
                })
            }
            None => width = Some(record.len()),
            _ => {}
        }
        for (col, cell) in record.iter().enumerate() {
            if is_missing(cell) {
                values.push(T::zero());
                mask.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| GmfError::Parse {
                    row: line,
                    msg: format!("column {}: `{cell}` is not a number", col + 1),
                })?;
                values.push(T::lit(v));
                mask.push(true);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(GmfError::EmptyInput("no data rows".into()));
    }
    let cols = width.unwrap_or(0);
    let y = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| GmfError::ShapeMismatch(e.to_string()))?;
    let m = Array2::from_shape_vec((rows, cols), mask).map_err(|e| GmfError::ShapeMismatch(e.to_string()))?;
    Ok((y, m))
}

/// Writes a matrix as CSV using the shortest decimal form that reads back to
/// the same value. Cells whose mask bit is cleared are written as `na_token`.
pub fn write_csv_matrix<T: Scalar>(
    path: impl AsRef<Path>,
    matrix: &Array2<T>,
    mask: Option<&Array2<bool>>,
    na_token: &str,
) -> Result<()> {
    if let Some(mask) = mask {
        if mask.dim() != matrix.dim() {
            return Err(GmfError::ShapeMismatch("mask and matrix differ in shape".into()));
        }
    }
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for (i, row) in matrix.outer_iter().enumerate() {
        let mut line = String::new();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            if mask.is_some_and(|mk| !mk[(i, j)]) {
                line.push_str(na_token);
            } else {
                line.push_str(&format!("{}", v.as_f64()));
            }
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a 0/1 mask matrix.
pub fn write_mask_csv(path: impl AsRef<Path>, mask: &Array2<bool>) -> Result<()> {
    let m = mask.mapv(|b| if b { 1.0f64 } else { 0.0 });
    write_csv_matrix(path, &m, None, "NA")
}

/// Reads a 0/1 mask matrix; any non-zero cell counts as set.
pub fn load_mask_csv(path: impl AsRef<Path>) -> Result<Array2<bool>> {
    let (m, present) = load_csv_matrix::<f64>(path, "NA")?;
    Ok(ndarray::Zip::from(&m).and(&present).map_collect(|&v, &p| p && v != 0.0))
}
