//! On-disk formats.
//!
//! - matrices: headerless CSV of reals, row-major, or `MAT1`: magic,
//!   rows u32, cols u32, four zero bytes, then f32 little-endian values
//! - quantized tensors: the `MXF4` container of [`quartet_core::mxfp4`]
//! - trust masks: `MSK1` with the same 16-byte header, then one bit per
//!   element, row-major, least significant bit first, 1 = not clipped
//! - run records, speedup tables, region grids, loss curves, gap tables
//!   and diagnostics as CSV; fit reports and diagnostics as JSON
//!
//! Run records use `n` = non-embedding parameters and `d` = training tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use quartet_core::mxfp4::QuantizedTensor;
use quartet_core::quantizers::ClipMask;
use quartet_core::scaling::{RegionCell, RunRecord, ScalingLawParams, SpeedupTable};
use quartet_core::trainkit::CurvePoint;
use quartet_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAT1_MAGIC: &[u8; 4] = b"MAT1";
pub const MSK1_MAGIC: &[u8; 4] = b"MSK1";
pub const BINARY_HEADER_LEN: usize = 16;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Usage(format!("{what} {n} does not fit the 32-bit header")))
}

fn binary_header(magic: &[u8; 4], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&to_u32(rows, "rows")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cols, "cols")?.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    Ok(out)
}

fn parse_binary_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::format(path, format!("header needs {BINARY_HEADER_LEN} bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(path, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    if word(12) != 0 {
        return Err(Error::format(path, "non-zero header padding"));
    }
    Ok((word(4), word(8), &bytes[BINARY_HEADER_LEN..]))
}

pub fn encode_mat1(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = binary_header(MAT1_MAGIC, m.rows(), m.cols())?;
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mat1(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let (rows, cols, payload) = parse_binary_header(path, bytes, MAT1_MAGIC)?;
    let want = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
    if want != Some(payload.len()) {
        return Err(Error::format(
            path,
            format!("{rows}x{cols} payload needs {} bytes, found {}", rows * cols * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

/// `row` numbering is 1-based over data rows, so a headered file's first
/// record after the header is row 1.
fn csv_error(path: &Path, e: &csv::Error, header: bool) -> Error {
    let msg = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        _ => e.to_string(),
    };
    match e.position() {
        Some(p) => {
            let row = if header { p.record() } else { p.record() + 1 };
            Error::format(path, format!("row {row} (line {}): {msg}", p.line()))
        }
        None => Error::format(path, msg),
    }
}

fn reader(bytes: &[u8], header: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(header)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes)
}

fn serialize_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("writing CSV to memory");
    }
    w.into_inner().expect("writing CSV to memory")
}

fn deserialize_rows<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<Vec<T>> {
    reader(bytes, true)
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, &e, true)))
        .collect()
}

pub fn encode_matrix_csv(m: &Matrix) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string())).expect("writing CSV to memory");
    }
    w.into_inner().expect("writing CSV to memory")
}

pub fn decode_matrix_csv(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for rec in reader(bytes, false).records() {
        let rec = rec.map_err(|e| csv_error(path, &e, false))?;
        rows += 1;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format(path, format!("row {rows} (line {line}): field {j}: invalid number `{field}`")))?;
            data.push(v);
        }
        cols = rec.len();
    }
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, "matrix has no rows"));
    }
    Ok(Matrix::from_vec(rows, cols, data)?)
}

/// Reads CSV or `MAT1`, told apart by the magic bytes.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(MAT1_MAGIC) {
        decode_mat1(path, &bytes)
    } else {
        decode_matrix_csv(path, &bytes)
    }
}

/// Writes `MAT1` (single precision) for a `.mat` extension, CSV otherwise.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    if path.extension().is_some_and(|e| e == "mat") {
        write_bytes(path, &encode_mat1(m)?)
    } else {
        write_bytes(path, &encode_matrix_csv(m))
    }
}

pub fn read_mxf4(path: &Path) -> Result<QuantizedTensor> {
    let bytes = read_bytes(path)?;
    QuantizedTensor::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_mxf4(path: &Path, q: &QuantizedTensor) -> Result<()> {
    write_bytes(path, &q.serialize())
}

pub fn encode_mask(mask: &ClipMask) -> Result<Vec<u8>> {
    let mut out = binary_header(MSK1_MAGIC, mask.rows(), mask.cols())?;
    out.extend(mask.as_slice().chunks(8).map(|c| {
        c.iter().enumerate().fold(0u8, |b, (k, &v)| b | (u8::from(v) << k))
    }));
    Ok(out)
}

pub fn decode_mask(path: &Path, bytes: &[u8]) -> Result<ClipMask> {
    let (rows, cols, payload) = parse_binary_header(path, bytes, MSK1_MAGIC)?;
    let n = rows * cols;
    if payload.len() != n.div_ceil(8) {
        return Err(Error::format(path, format!("{rows}x{cols} mask needs {} bytes, found {}", n.div_ceil(8), payload.len())));
    }
    if n % 8 != 0 && payload[n / 8] >> (n % 8) != 0 {
        return Err(Error::format(path, "non-zero padding bits"));
    }
    let bits = (0..n).map(|k| payload[k / 8] >> (k % 8) & 1 == 1).collect();
    Ok(ClipMask::from_vec(rows, cols, bits).expect("length checked"))
}

pub fn read_mask(path: &Path) -> Result<ClipMask> {
    decode_mask(path, &read_bytes(path)?)
}

pub fn write_mask(path: &Path, mask: &ClipMask) -> Result<()> {
    write_bytes(path, &encode_mask(mask)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    n: f64,
    d: f64,
    p_fwd: String,
    p_bwd: String,
    loss: f64,
}

pub fn encode_records(records: &[RunRecord]) -> Vec<u8> {
    serialize_rows(records.iter().map(|r| RecordRow {
        n: r.n,
        d: r.d,
        p_fwd: r.p_fwd.clone(),
        p_bwd: r.p_bwd.clone(),
        loss: r.loss,
    }))
}

/// An empty file is a usage error, not a format error.
pub fn decode_records(path: &Path, bytes: &[u8]) -> Result<Vec<RunRecord>> {
    let rows: Vec<RecordRow> = deserialize_rows(path, bytes)?;
    if rows.is_empty() {
        return Err(Error::Usage(format!("{}: no run records", path.display())));
    }
    for (k, r) in rows.iter().enumerate() {
        let ok = [r.n, r.d, r.loss].iter().all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(Error::format(path, format!("row {}: n, d and loss must be positive and finite", k + 1)));
        }
    }
    Ok(rows.into_iter().map(|r| RunRecord::new(r.n, r.d, &r.p_fwd, &r.p_bwd, r.loss)).collect())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    decode_records(path, &read_bytes(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct SpeedupRow {
    p_fwd: String,
    p_bwd: String,
    s_fwd: f64,
    s_bwd: f64,
}

pub fn encode_speedups(t: &SpeedupTable) -> Vec<u8> {
    serialize_rows(t.entries.iter().map(|((f, b), s)| SpeedupRow {
        p_fwd: f.clone(),
        p_bwd: b.clone(),
        s_fwd: s.s_fwd,
        s_bwd: s.s_bwd,
    }))
}

pub fn read_speedups(path: &Path) -> Result<SpeedupTable> {
    let rows: Vec<SpeedupRow> = deserialize_rows(path, &read_bytes(path)?)?;
    if rows.is_empty() {
        return Err(Error::Usage(format!("{}: empty speedup table", path.display())));
    }
    let mut t = SpeedupTable {
        entries: BTreeMap::new(),
    };
    for (k, r) in rows.iter().enumerate() {
        if !(r.s_fwd > 0.0 && r.s_bwd > 0.0 && r.s_fwd.is_finite() && r.s_bwd.is_finite()) {
            return Err(Error::format(path, format!("row {}: speedups must be positive and finite", k + 1)));
        }
        t.insert(&r.p_fwd, &r.p_bwd, r.s_fwd, r.s_bwd);
    }
    Ok(t)
}

#[derive(Debug, Serialize)]
struct RegionRow<'a> {
    n_max: f64,
    budget: f64,
    best_p_fwd: &'a str,
    best_p_bwd: &'a str,
    loss: f64,
}

/// Region grid CSV preceded by `#` provenance lines recording the law's
/// coefficients and every speedup pair as `(s_fwd,s_bwd)->s_train`.
pub fn encode_region(cells: &[RegionCell], params: &ScalingLawParams, speedups: &SpeedupTable) -> Result<Vec<u8>> {
    let mut out = String::new();
    out.push_str(&format!(
        "# params a={:?} alpha={:?} b={:?} beta={:?} gamma={:?} e={:?} baseline={}\n",
        params.a, params.alpha, params.b, params.beta, params.gamma, params.e, params.baseline
    ));
    for (name, map) in [("eff_n", &params.eff_n), ("eff_d", &params.eff_d)] {
        let kv: Vec<String> = map.iter().map(|(k, v)| format!("{k}={v:?}")).collect();
        out.push_str(&format!("# {name} {}\n", kv.join(" ")));
    }
    for ((f, b), s) in &speedups.entries {
        out.push_str(&format!("# speedup {f}:{b} ({:?},{:?})->{:?}\n", s.s_fwd, s.s_bwd, s.training()?));
    }
    let mut bytes = out.into_bytes();
    bytes.extend(serialize_rows(cells.iter().map(|c| RegionRow {
        n_max: c.n_max,
        budget: c.budget,
        best_p_fwd: &c.best.0,
        best_p_bwd: &c.best.1,
        loss: c.loss,
    })));
    Ok(bytes)
}

#[derive(Debug, Serialize)]
struct CurveRow {
    step: usize,
    loss: f64,
    lr: f64,
}

pub fn encode_curve(curve: &[CurvePoint]) -> Vec<u8> {
    serialize_rows(curve.iter().map(|p| CurveRow {
        step: p.step,
        loss: p.loss,
        lr: p.lr,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub pair: String,
    pub ratio: f64,
    pub steps: usize,
    pub seeds: usize,
    pub diverged: usize,
    pub gap_mean: f64,
    pub gap_median: f64,
    pub gap_std: f64,
    /// `ok`, or `diverged` when any seed of the cell diverged.
    pub status: String,
}

pub fn encode_gaps(rows: &[GapRow]) -> Vec<u8> {
    serialize_rows(rows)
}

pub fn decode_gaps(path: &Path, bytes: &[u8]) -> Result<Vec<GapRow>> {
    deserialize_rows(path, bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub scheme: String,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

pub fn encode_diag_csv(rows: &[DiagRow]) -> Vec<u8> {
    serialize_rows(rows)
}

pub fn decode_diag_csv(path: &Path, bytes: &[u8]) -> Result<Vec<DiagRow>> {
    deserialize_rows(path, bytes)
}

pub fn encode_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializing to memory");
    v.push(b'\n');
    v
}

pub fn decode_json<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
    pub gamma: f64,
    pub e: f64,
    pub baseline: String,
    pub eff_n: BTreeMap<String, f64>,
    pub eff_d: BTreeMap<String, f64>,
}

impl From<&ScalingLawParams> for ParamsJson {
    fn from(p: &ScalingLawParams) -> Self {
        Self {
            a: p.a,
            alpha: p.alpha,
            b: p.b,
            beta: p.beta,
            gamma: p.gamma,
            e: p.e,
            baseline: p.baseline.clone(),
            eff_n: p.eff_n.clone(),
            eff_d: p.eff_d.clone(),
        }
    }
}

impl ParamsJson {
    pub fn to_params(&self) -> quartet_core::Result<ScalingLawParams> {
        let mut p = ScalingLawParams::with_core(self.a, self.alpha, self.b, self.beta, self.gamma, self.e, &self.baseline);
        p.eff_n.extend(self.eff_n.iter().map(|(k, v)| (k.clone(), *v)));
        p.eff_d.extend(self.eff_d.iter().map(|(k, v)| (k.clone(), *v)));
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualJson {
    pub n: f64,
    pub d: f64,
    pub p_fwd: String,
    pub p_bwd: String,
    pub loss: f64,
    pub predicted: f64,
    /// `ln(predicted) - ln(loss)`.
    pub log_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageJson {
    pub objective: f64,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptionsJson {
    pub loss: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub form: String,
    pub baseline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormJson {
    pub form: String,
    pub objective: f64,
    pub params: ParamsJson,
}

/// Fit report: final parameters, objective of the final parameters over
/// every record, and per-record residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitJson {
    pub params: ParamsJson,
    pub objective: f64,
    pub residuals: Vec<ResidualJson>,
    pub stage1: StageJson,
    pub stage2: Option<StageJson>,
    pub options: FitOptionsJson,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forms: Vec<FormJson>,
}

/// Parameters from any JSON object with a `params` field (a fit report)
/// or from a bare parameter object.
pub fn read_params(path: &Path) -> Result<ScalingLawParams> {
    let bytes = read_bytes(path)?;
    let value: serde_json::Value = decode_json(path, &bytes)?;
    let inner = value.get("params").cloned().unwrap_or(value);
    let p: ParamsJson = serde_json::from_value(inner).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(p.to_params()?)
}
