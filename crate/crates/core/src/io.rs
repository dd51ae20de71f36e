//! File formats.
//!
//! DTF is a small text header followed by a raw little-endian `f64` payload:
//!
//! ```text
//! DTF 1
//! dims 2 3 4 5
//! order IJKL
//! dtype f64
//! layout row-major
//! end
//! <2*3*4*5 little-endian f64 values>
//! ```
//!
//! `order` names the axes (`IJKL` for data, `IRKL` for elution profiles,
//! `JR11` or `LR11` for matrices). Matrices are stored as `[rows, cols, 1, 1]`.
//!
//! Structured metadata (model, report, ground truth) is JSON carrying a
//! `schema_version`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::coupled::{CoupledConfig, CoupledModel, FitReport};
use crate::error::{Error, Result};
use crate::flex::FitStatus;
use crate::synth::{ApexPlacement, GroundTruth, SynthConfig};
use crate::tensor::{DenseTensor4, Matrix};

pub const DTF_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

pub const DATA_ORDER: &str = "IJKL";
pub const PROFILE_ORDER: &str = "IRKL";

pub const PROFILES_FILE: &str = "F.dtf";
pub const SPECTRA_FILE: &str = "A.dtf";
pub const ABUNDANCES_FILE: &str = "D.dtf";
pub const MODEL_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.json";
pub const DATA_FILE: &str = "data.dtf";
pub const TRUTH_FILE: &str = "truth.json";
pub const TRUTH_SCORES_FILE: &str = "truth_scores.dtf";

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn encode_dtf(x: &DenseTensor4, order: &str) -> Result<Vec<u8>> {
    if order.is_empty() || order.chars().any(char::is_whitespace) {
        return Err(Error::Config(format!("invalid axis order {order:?}")));
    }
    let [a, b, c, d] = x.shape();
    let header = format!("DTF {DTF_VERSION}\ndims {a} {b} {c} {d}\norder {order}\ndtype f64\nlayout row-major\nend\n");
    let mut out = Vec::with_capacity(header.len() + 8 * x.data().len());
    out.extend_from_slice(header.as_bytes());
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a DTF buffer into its axis order and tensor.
pub fn decode_dtf(bytes: &[u8]) -> Result<(String, DenseTensor4)> {
    let mut pos = 0usize;
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        let start = pos;
        let len = bytes[start..]
            .iter()
            .take(256)
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(start, format!("unterminated header line, expected {expect}")))?;
        let line = std::str::from_utf8(&bytes[start..start + len])
            .map_err(|_| parse_err(start, "header is not UTF-8"))?
            .to_string();
        pos = start + len + 1;
        Ok((start, line))
    };

    let (off, magic) = next_line("magic")?;
    match magic.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["DTF", v] if *v == DTF_VERSION.to_string() => {}
        ["DTF", v] => return Err(parse_err(off, format!("unsupported DTF version {v}"))),
        _ => return Err(parse_err(off, format!("not a DTF file (header {magic:?})"))),
    }

    let (off, dims_line) = next_line("dims")?;
    let fields: Vec<&str> = dims_line.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "dims" {
        return Err(parse_err(off, format!("expected 'dims a b c d', found {dims_line:?}")));
    }
    let mut shape = [0usize; 4];
    for (slot, field) in shape.iter_mut().zip(&fields[1..]) {
        *slot = field
            .parse()
            .map_err(|_| parse_err(off, format!("invalid dimension {field:?}")))?;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8).map(|bytes| (n, bytes)))
        .ok_or_else(|| parse_err(off, format!("dims {shape:?} overflow")))?;

    let (off, order_line) = next_line("order")?;
    let order = match order_line.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["order", o] => o.to_string(),
        _ => return Err(parse_err(off, format!("expected 'order XXXX', found {order_line:?}"))),
    };
    for (key, value) in [("dtype", "f64"), ("layout", "row-major")] {
        let (off, line) = next_line(key)?;
        if line.split_whitespace().collect::<Vec<_>>() != [key, value] {
            return Err(parse_err(off, format!("expected '{key} {value}', found {line:?}")));
        }
    }
    let (off, end) = next_line("end")?;
    if end.trim() != "end" {
        return Err(parse_err(off, format!("expected 'end', found {end:?}")));
    }

    let payload = &bytes[pos..];
    let (n, expected) = count;
    if payload.len() < expected {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(parse_err(
            pos + expected,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    debug_assert_eq!(data.len(), n);
    let tensor = DenseTensor4::from_vec(shape, data).map_err(|e| parse_err(off, e.to_string()))?;
    Ok((order, tensor))
}

pub fn write_dtf(path: &Path, x: &DenseTensor4, order: &str) -> Result<()> {
    let bytes = encode_dtf(x, order)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_dtf(path: &Path) -> Result<(String, DenseTensor4)> {
    decode_dtf(&fs::read(path)?)
}

pub fn write_tensor(path: &Path, x: &DenseTensor4) -> Result<()> {
    write_dtf(path, x, DATA_ORDER)
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor4> {
    read_dtf(path).map(|(_, x)| x)
}

pub fn matrix_to_tensor(m: &Matrix) -> DenseTensor4 {
    let (rows, cols) = m.shape();
    let data: Vec<f64> = (0..rows).flat_map(|i| (0..cols).map(move |j| m[(i, j)])).collect();
    DenseTensor4::from_vec([rows.max(1), cols.max(1), 1, 1], data).expect("matrix shape is valid")
}

pub fn tensor_to_matrix(x: &DenseTensor4) -> Result<Matrix> {
    let [rows, cols, c, d] = x.shape();
    if c != 1 || d != 1 {
        return Err(Error::dim(format!("expected a [rows, cols, 1, 1] tensor, got {:?}", x.shape())));
    }
    Ok(Matrix::from_row_slice(rows, cols, x.data()))
}

pub fn write_matrix(path: &Path, m: &Matrix, order: &str) -> Result<()> {
    write_dtf(path, &matrix_to_tensor(m), order)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    tensor_to_matrix(&read_tensor(path)?)
}

/// Writes a matrix as CSV with one header row of column names.
pub fn write_matrix_csv(path: &Path, m: &Matrix, header: &[String]) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::dim(format!("{} column names for {} columns", header.len(), m.ncols())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV matrix (header row, then numeric rows); returns the matrix and the header.
pub fn read_matrix_csv(path: &Path) -> Result<(Matrix, Vec<String>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::dim(format!(
                "row {} has {} fields, header has {}",
                line + 1,
                record.len(),
                header.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                let offset = record.position().map_or(0, |p| p.byte());
                parse_err(offset as usize, format!("row {}: invalid number {field:?}", line + 1))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((Matrix::from_row_slice(rows, header.len(), &values), header))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn check_schema(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{what} has schema_version {found}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub schema_version: u32,
    pub rank: usize,
    /// `[I, J, K, L]` of the fitted data.
    pub dims: [usize; 4],
    pub status: FitStatus,
    pub mu_a: f64,
    pub config: CoupledConfig,
}

/// Fitted factors as stored on disk.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub meta: ModelMeta,
    /// `[I, R, K, L]`.
    pub profiles: DenseTensor4,
    /// `J x R`.
    pub spectra: Matrix,
    /// `L x R`.
    pub abundances: Matrix,
}

impl ModelBundle {
    pub fn from_model(model: &CoupledModel, dims: [usize; 4], config: &CoupledConfig) -> Self {
        let nl = model.abundances.len();
        let nr = model.rank();
        Self {
            meta: ModelMeta {
                schema_version: SCHEMA_VERSION,
                rank: nr,
                dims,
                status: model.report.status,
                mu_a: model.mu_a,
                config: config.clone(),
            },
            profiles: model.profiles.clone(),
            spectra: model.spectra.clone(),
            abundances: Matrix::from_fn(nl, nr, |l, r| model.abundances[l][r]),
        }
    }

    pub fn rank(&self) -> usize {
        self.spectra.ncols()
    }

    pub fn abundance_vectors(&self) -> Vec<DVector<f64>> {
        self.abundances.row_iter().map(|row| row.transpose()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let [ni, nr, nk, nl] = self.profiles.shape();
        let [di, dj, dk, dl] = self.meta.dims;
        if (ni, nk, nl) != (di, dk, dl)
            || self.spectra.shape() != (dj, nr)
            || self.abundances.shape() != (nl, nr)
            || self.meta.rank != nr
        {
            return Err(Error::dim(format!(
                "inconsistent model: dims {:?}, rank {}, profiles {:?}, spectra {:?}, abundances {:?}",
                self.meta.dims,
                self.meta.rank,
                self.profiles.shape(),
                self.spectra.shape(),
                self.abundances.shape()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_dtf(&dir.join(PROFILES_FILE), &self.profiles, PROFILE_ORDER)?;
        write_matrix(&dir.join(SPECTRA_FILE), &self.spectra, "JR11")?;
        write_matrix(&dir.join(ABUNDANCES_FILE), &self.abundances, "LR11")?;
        write_json(&dir.join(MODEL_FILE), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta = read_json(&dir.join(MODEL_FILE))?;
        check_schema(meta.schema_version, "model")?;
        let bundle = Self {
            meta,
            profiles: read_tensor(&dir.join(PROFILES_FILE))?,
            spectra: read_matrix(&dir.join(SPECTRA_FILE))?,
            abundances: read_matrix(&dir.join(ABUNDANCES_FILE))?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn save_report(dir: &Path, report: &FitReport) -> Result<()> {
    write_json(&dir.join(REPORT_FILE), report)
}

pub fn load_report(dir: &Path) -> Result<FitReport> {
    let report: FitReport = read_json(&dir.join(REPORT_FILE))?;
    check_schema(report.schema_version, "report")?;
    Ok(report)
}

/// Ground-truth sidecar; the score maps live in a separate DTF file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: u32,
    pub config: SynthConfig,
    /// `[I, J, K, L]`.
    pub dims: [usize; 4],
    /// `[component][channel]`.
    pub spectra: Vec<Vec<f64>>,
    /// `[component][sample]`.
    pub abundances: Vec<Vec<f64>>,
    pub apexes: Vec<Vec<ApexPlacement>>,
    pub noise_sd: f64,
    pub offset: f64,
    pub warnings: Vec<String>,
}

impl TruthFile {
    pub fn new(config: &SynthConfig, dims: [usize; 4], truth: &GroundTruth, warnings: &[String]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            dims,
            spectra: truth.spectra.column_iter().map(|c| c.iter().copied().collect()).collect(),
            abundances: truth.abundances.clone(),
            apexes: truth.apexes.clone(),
            noise_sd: truth.noise_sd,
            offset: truth.offset,
            warnings: warnings.to_vec(),
        }
    }

    /// `J x R` spectra matrix.
    pub fn spectra_matrix(&self) -> Result<Matrix> {
        let nr = self.spectra.len();
        let nj = self.spectra.first().map_or(0, Vec::len);
        if nr == 0 || self.spectra.iter().any(|s| s.len() != nj) {
            return Err(Error::dim("truth spectra must be non-empty and equally long"));
        }
        Ok(Matrix::from_fn(nj, nr, |j, r| self.spectra[r][j]))
    }
}

/// Ground truth as read back from disk.
#[derive(Debug, Clone)]
pub struct TruthBundle {
    pub file: TruthFile,
    /// `[I, R, K, L]`.
    pub score_maps: DenseTensor4,
}

pub fn save_truth(dir: &Path, file: &TruthFile, score_maps: &DenseTensor4) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(TRUTH_FILE), file)?;
    write_dtf(&dir.join(TRUTH_SCORES_FILE), score_maps, PROFILE_ORDER)
}

/// Loads ground truth from a directory holding `truth.json` and `truth_scores.dtf`,
/// or from the path of `truth.json` itself.
pub fn load_truth(path: &Path) -> Result<TruthBundle> {
    let (json, dir) = if path.is_dir() {
        (path.join(TRUTH_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let file: TruthFile = read_json(&json)?;
    check_schema(file.schema_version, "truth")?;
    let score_maps = read_tensor(&dir.join(TRUTH_SCORES_FILE))?;
    let [ni, nr, nk, nl] = score_maps.shape();
    let [di, _, dk, dl] = file.dims;
    if (ni, nk, nl) != (di, dk, dl) || nr != file.spectra.len() {
        return Err(Error::dim(format!(
            "truth score maps {:?} do not match dims {:?} with {} components",
            score_maps.shape(),
            file.dims,
            file.spectra.len()
        )));
    }
    Ok(TruthBundle { file, score_maps })
}
