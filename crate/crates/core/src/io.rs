//! Dataset and result files: UTF-8 CSV preceded by a JSON header block in
//! `# ` comment lines. Floats are written in their shortest round-trip form,
//! so a write/read cycle is lossless.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::Method;
use crate::scheme::{AcquisitionScheme, Factorial};
use crate::synth::GroundTruth;
use crate::tensor::{GradientControl, TensorOrder};

pub const DATASET_FORMAT: &str = "rice-em-dataset";
pub const RESULT_FORMAT: &str = "rice-em-result";
pub const FORMAT_VERSION: u32 = 1;

const DATASET_COLUMNS: &str = "voxel_id,acquisition_index,magnitude";

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Factorial(Factorial),
    Rows(Vec<GradientControl>),
}

impl SchemeSpec {
    pub fn from_scheme(scheme: &AcquisitionScheme) -> Self {
        match scheme.layout() {
            Some(l) => SchemeSpec::Factorial(l.clone()),
            None => SchemeSpec::Rows(scheme.rows().to_vec()),
        }
    }

    pub fn to_scheme(&self) -> Result<AcquisitionScheme> {
        match self {
            SchemeSpec::Factorial(f) => AcquisitionScheme::factorial(f.directions.clone(), f.knots.clone(), f.repetitions),
            SchemeSpec::Rows(r) => AcquisitionScheme::from_rows(r.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub scheme: SchemeSpec,
    #[serde(default)]
    pub truth: Option<GroundTruth>,
    /// Seed the magnitudes were drawn from (the master seed for
    /// multi-voxel ensembles).
    #[serde(default)]
    pub seed: Option<u64>,
    /// Per-voxel seeds, parallel to the voxel blocks.
    #[serde(default)]
    pub voxel_seeds: Vec<u64>,
    /// Set when the scheme and truth are shipped fixtures.
    #[serde(default)]
    pub fixture: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelRecord {
    pub voxel_id: usize,
    pub magnitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scheme: AcquisitionScheme,
    pub voxels: Vec<VoxelRecord>,
}

impl Dataset {
    pub fn new(scheme: AcquisitionScheme, voxels: Vec<VoxelRecord>) -> Self {
        Self {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: FORMAT_VERSION,
                scheme: SchemeSpec::from_scheme(&scheme),
                truth: None,
                seed: None,
                voxel_seeds: Vec::new(),
                fixture: None,
            },
            scheme,
            voxels,
        }
    }
}

fn write_header<T: Serialize>(out: &mut String, header: &T) {
    let json = serde_json::to_string_pretty(header).expect("header serialises");
    for line in json.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
}

/// Splits off the leading `#` block; returns the parsed header and the
/// remaining lines with their 1-based line numbers.
fn split_header<T: for<'de> Deserialize<'de>>(text: &str) -> Result<(T, Vec<(usize, &str)>)> {
    let mut json = String::new();
    let mut body = Vec::new();
    let mut in_header = true;
    for (i, line) in text.lines().enumerate() {
        if in_header && line.starts_with('#') {
            let rest = &line[1..];
            json.push_str(rest.strip_prefix(' ').unwrap_or(rest));
            json.push('\n');
            continue;
        }
        in_header = false;
        if !line.trim().is_empty() {
            body.push((i + 1, line));
        }
    }
    if json.is_empty() {
        return Err(Error::Parse { line: 1, message: "missing `#` header block".into() });
    }
    let header = serde_json::from_str(&json).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("header: {e}"),
    })?;
    Ok((header, body))
}

fn check_format(found: &str, version: u32, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Parse { line: 1, message: format!("expected format `{expected}`, found `{found}`") });
    }
    if version != FORMAT_VERSION {
        return Err(Error::Parse { line: 1, message: format!("unsupported format version {version}") });
    }
    Ok(())
}

pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    write_header(&mut out, &ds.header);
    out.push_str(DATASET_COLUMNS);
    out.push('\n');
    for v in &ds.voxels {
        for (i, y) in v.magnitudes.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", v.voxel_id, i, fmt_f64(*y));
        }
    }
    out
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line: usize, name: &str) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse { line, message: format!("missing column `{name}`") })?;
    raw.trim().parse().map_err(|_| Error::Parse { line, message: format!("bad {name} `{raw}`") })
}

/// Parses a dataset. Voxel blocks must be contiguous and each must list
/// every acquisition index of the scheme exactly once.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let (header, body): (DatasetHeader, _) = split_header(text)?;
    check_format(&header.format, header.version, DATASET_FORMAT)?;
    let scheme = header.scheme.to_scheme()?;
    let m = scheme.len();
    let mut rows = body.into_iter();
    match rows.next() {
        Some((_, cols)) if cols.trim() == DATASET_COLUMNS => {}
        Some((line, cols)) => {
            return Err(Error::Parse { line, message: format!("expected columns `{DATASET_COLUMNS}`, found `{cols}`") })
        }
        None => return Err(Error::Parse { line: 1, message: "missing column header".into() }),
    }

    let mut voxels: Vec<VoxelRecord> = Vec::new();
    let mut seen_ids = std::collections::BTreeSet::new();
    let mut filled: Vec<bool> = Vec::new();
    let mut start_line = 0;
    let finish = |v: &VoxelRecord, filled: &[bool], line: usize| -> Result<()> {
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(Error::Parse {
                line,
                message: format!("voxel {} has no record for acquisition {missing}", v.voxel_id),
            });
        }
        Ok(())
    };
    for (line, text) in rows {
        let mut f = text.split(',');
        let id: usize = parse_field(f.next(), line, "voxel_id")?;
        let idx: usize = parse_field(f.next(), line, "acquisition_index")?;
        let y: f64 = parse_field(f.next(), line, "magnitude")?;
        if f.next().is_some() {
            return Err(Error::Parse { line, message: "too many columns".into() });
        }
        if idx >= m {
            return Err(Error::Parse { line, message: format!("acquisition_index {idx} out of range (scheme has {m} rows)") });
        }
        if !(y.is_finite() && y >= 0.0) {
            return Err(Error::Parse { line, message: format!("magnitude must be finite and >= 0, got {y}") });
        }
        if voxels.last().is_none_or(|v| v.voxel_id != id) {
            if let Some(prev) = voxels.last() {
                finish(prev, &filled, start_line)?;
            }
            if !seen_ids.insert(id) {
                return Err(Error::Parse { line, message: format!("voxel {id} block is not contiguous") });
            }
            voxels.push(VoxelRecord { voxel_id: id, magnitudes: vec![0.0; m] });
            filled = vec![false; m];
            start_line = line;
        }
        if filled[idx] {
            return Err(Error::Parse { line, message: format!("duplicate acquisition_index {idx} for voxel {id}") });
        }
        filled[idx] = true;
        voxels.last_mut().unwrap().magnitudes[idx] = y;
    }
    if let Some(prev) = voxels.last() {
        finish(prev, &filled, start_line)?;
    }
    Ok(Dataset { header, scheme, voxels })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&read_text(path)?)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_text(path, &format_dataset(ds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultHeader {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub order: TensorOrder,
    #[serde(default)]
    pub dataset_seed: Option<u64>,
    /// Effective estimator settings, for provenance.
    #[serde(default)]
    pub settings: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub voxel_id: usize,
    pub method: Method,
    pub order: TensorOrder,
    pub theta: Vec<f64>,
    pub s0_sq: f64,
    pub sigma_sq: f64,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    /// Order-2 fits only.
    pub fa: Option<f64>,
    pub md: f64,
    pub degenerate: bool,
    pub non_converged: bool,
    pub positivity_fail: bool,
    /// `ok`, or the error kind when the voxel could not be fitted.
    pub status: String,
}

fn result_columns(order: TensorOrder) -> String {
    let mut cols = vec!["voxel_id".to_string(), "method".into(), "order".into()];
    cols.extend((0..order.dim()).map(|j| format!("theta_{j}")));
    cols.extend(
        ["s0_sq", "sigma_sq", "converged", "iterations", "loglik", "fa", "md", "degenerate", "non_converged", "positivity_fail", "status"]
            .map(String::from),
    );
    cols.join(",")
}

pub fn format_results(header: &ResultHeader, rows: &[ResultRow]) -> String {
    let mut out = String::new();
    write_header(&mut out, header);
    out.push_str(&result_columns(header.order));
    out.push('\n');
    for r in rows {
        let mut f: Vec<String> = vec![r.voxel_id.to_string(), r.method.to_string(), r.order.to_string()];
        f.extend(r.theta.iter().map(|v| fmt_f64(*v)));
        f.push(fmt_f64(r.s0_sq));
        f.push(fmt_f64(r.sigma_sq));
        f.push(r.converged.to_string());
        f.push(r.iterations.to_string());
        f.push(fmt_f64(r.loglik));
        f.push(r.fa.map(fmt_f64).unwrap_or_default());
        f.push(fmt_f64(r.md));
        f.push(r.degenerate.to_string());
        f.push(r.non_converged.to_string());
        f.push(r.positivity_fail.to_string());
        f.push(r.status.clone());
        out.push_str(&f.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_results(text: &str) -> Result<(ResultHeader, Vec<ResultRow>)> {
    let (header, body): (ResultHeader, _) = split_header(text)?;
    check_format(&header.format, header.version, RESULT_FORMAT)?;
    let cols = result_columns(header.order);
    let mut lines = body.into_iter();
    match lines.next() {
        Some((_, c)) if c.trim() == cols => {}
        Some((line, c)) => return Err(Error::Parse { line, message: format!("expected columns `{cols}`, found `{c}`") }),
        None => return Err(Error::Parse { line: 1, message: "missing column header".into() }),
    }
    let d = header.order.dim();
    let mut rows = Vec::new();
    for (line, text) in lines {
        let f: Vec<&str> = text.split(',').collect();
        if f.len() != d + 14 {
            return Err(Error::Parse { line, message: format!("expected {} columns, found {}", d + 14, f.len()) });
        }
        let num = |i: usize, name: &str| parse_field::<f64>(Some(f[i]), line, name);
        let flag = |i: usize, name: &str| parse_field::<bool>(Some(f[i]), line, name);
        let method: Method = f[1].parse().map_err(|_| Error::Parse { line, message: format!("bad method `{}`", f[1]) })?;
        let order_u8: u8 = parse_field(Some(f[2]), line, "order")?;
        let order = TensorOrder::try_from(order_u8).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if order != header.order {
            return Err(Error::Parse { line, message: format!("row order {order} differs from header order {}", header.order) });
        }
        let theta = (0..d).map(|j| num(3 + j, "theta")).collect::<Result<Vec<_>>>()?;
        let k = 3 + d;
        rows.push(ResultRow {
            voxel_id: parse_field(Some(f[0]), line, "voxel_id")?,
            method,
            order,
            theta,
            s0_sq: num(k, "s0_sq")?,
            sigma_sq: num(k + 1, "sigma_sq")?,
            converged: flag(k + 2, "converged")?,
            iterations: parse_field(Some(f[k + 3]), line, "iterations")?,
            loglik: num(k + 4, "loglik")?,
            fa: if f[k + 5].is_empty() { None } else { Some(num(k + 5, "fa")?) },
            md: num(k + 6, "md")?,
            degenerate: flag(k + 7, "degenerate")?,
            non_converged: flag(k + 8, "non_converged")?,
            positivity_fail: flag(k + 9, "positivity_fail")?,
            status: f[k + 10].to_string(),
        });
    }
    Ok((header, rows))
}

pub fn read_results(path: &Path) -> Result<(ResultHeader, Vec<ResultRow>)> {
    parse_results(&read_text(path)?)
}

/// Wall times live next to the results (`<results>.timing`, CSV) so the
/// result file itself stays reproducible byte for byte.
pub fn format_timing(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("voxel_id,wall_seconds\n");
    for (id, t) in rows {
        let _ = writeln!(out, "{id},{}", fmt_f64(*t));
    }
    out
}

pub fn timing_path(results: &Path) -> std::path::PathBuf {
    let mut name = results.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timing");
    results.with_file_name(name)
}
