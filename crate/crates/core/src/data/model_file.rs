use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use super::{FitReport, ModelParams};
use crate::error::{GmfError, Result};
use crate::family::Family;
use crate::scalar::Scalar;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "gmf-model";

/// On-disk layout. Matrices are flattened column-major.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    family: String,
    n: usize,
    m: usize,
    d: usize,
    p: usize,
    beta0: Vec<f64>,
    b: Vec<f64>,
    lambda: Vec<f64>,
    u: Vec<f64>,
    phi: Vec<f64>,
    report: FitReport,
}

fn col_major<T: Scalar>(a: &Array2<T>) -> Vec<f64> {
    a.t().iter().map(|v| v.as_f64()).collect()
}

fn from_col_major<T: Scalar>(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Result<Array2<T>> {
    if data.len() != rows * cols {
        return Err(GmfError::ShapeMismatch(format!(
            "{name} declares {rows}×{cols} but holds {} values",
            data.len()
        )));
    }
    Array2::from_shape_vec((rows, cols).f(), data.into_iter().map(T::lit).collect())
        .map_err(|e| GmfError::MalformedModel(e.to_string()))
}

fn vector<T: Scalar>(name: &str, len: usize, data: Vec<f64>) -> Result<Array1<T>> {
    if data.len() != len {
        return Err(GmfError::ShapeMismatch(format!(
            "{name} declares length {len} but holds {} values",
            data.len()
        )));
    }
    Ok(data.into_iter().map(T::lit).collect())
}

/// Writes parameters and their fit report as one JSON document.
///
/// Values are widened to `f64` and printed in shortest round-trip form, so
/// a load reproduces every entry bit for bit.
pub fn save_model<T: Scalar>(params: &ModelParams<T>, report: &FitReport, path: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let file = ModelFile {
        format: FORMAT_TAG.to_string(),
        version: MODEL_FORMAT_VERSION,
        family: report.family.name().to_string(),
        n: params.n(),
        m: params.m(),
        d: params.d(),
        p: params.p(),
        beta0: params.beta0.iter().map(|v| v.as_f64()).collect(),
        b: col_major(&params.b),
        lambda: col_major(&params.lambda),
        u: col_major(&params.u),
        phi: params.phi.iter().map(|v| v.as_f64()).collect(),
        report: report.clone(),
    };
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer_pretty(&mut out, &file)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Reads a model written by [`save_model`], validating version, family and
/// every declared shape.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, FitReport)> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let value: serde_json::Value = serde_json::from_reader(reader)?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| GmfError::MalformedModel("missing `version`".into()))? as u32;
    if version != MODEL_FORMAT_VERSION {
        return Err(GmfError::VersionMismatch { found: version, expected: MODEL_FORMAT_VERSION });
    }
    if let Some(token) = value.get("family").and_then(|v| v.as_str()) {
        token.parse::<Family>()?;
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| GmfError::MalformedModel(e.to_string()))?;
    if file.format != FORMAT_TAG {
        return Err(GmfError::MalformedModel(format!("unexpected format tag `{}`", file.format)));
    }
    let family: Family = file.family.parse()?;
    if family != file.report.family {
        return Err(GmfError::MalformedModel("family tag disagrees with the report".into()));
    }
    let params = ModelParams {
        beta0: vector("beta0", file.m, file.beta0)?,
        b: from_col_major("b", file.d, file.m, file.b)?,
        lambda: from_col_major("lambda", file.p, file.m, file.lambda)?,
        u: from_col_major("u", file.n, file.p, file.u)?,
        phi: vector("phi", file.m, file.phi)?,
    };
    params.validate()?;
    Ok((params, file.report))
}
