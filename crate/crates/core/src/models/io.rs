//! Parameter vector files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "NPTLPARM"
//! version    u32
//! spec hash  u64
//! phi        u64 start, u64 end
//! head       u64 start, u64 end
//! count      u64
//! values     count x f64
//! ```
//!
//! The text form carries the same header as `key value` lines followed by one
//! value per line, printed in shortest round-trip notation.

use std::fs;
use std::path::Path;

use crate::error::{NptlError, Result};

use super::{ModelSpec, ParamVector};

pub const PARAM_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NPTLPARM";
const HEADER_LEN: usize = 8 + 4 + 8 + 8 * 4 + 8;

fn format_err(path: &Path, reason: impl Into<String>) -> NptlError {
    NptlError::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_param_file(path: impl AsRef<Path>, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let path = path.as_ref();
    spec.check_params(params)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&spec.spec_hash().to_le_bytes());
    for v in [params.phi_span.start, params.phi_span.end, params.head_span.start, params.head_span.end, params.len()] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| NptlError::io(path, e))
}

/// Reads a binary parameter file and checks it against `spec`.
pub fn read_param_file(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ParamVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NptlError::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a parameter file (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != PARAM_FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {version}")));
    }
    let hash = u64_at(12);
    if hash != spec.spec_hash() {
        return Err(format_err(
            path,
            format!("spec hash {hash:016x} does not match model spec {:016x}", spec.spec_hash()),
        ));
    }
    let fields: Vec<usize> = (0..5).map(|k| u64_at(20 + 8 * k) as usize).collect();
    let count = fields[4];
    if bytes.len() != HEADER_LEN + 8 * count {
        return Err(format_err(path, format!("expected {count} values, file has {} bytes", bytes.len())));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = ParamVector { values, phi_span: fields[0]..fields[1], head_span: fields[2]..fields[3] };
    spec.check_params(&params).map_err(|e| format_err(path, e.to_string()))?;
    Ok(params)
}

pub fn write_param_text(path: impl AsRef<Path>, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let path = path.as_ref();
    spec.check_params(params)?;
    let mut out = String::new();
    out.push_str(&format!("format {PARAM_FORMAT_VERSION}\n"));
    out.push_str(&format!("spec_hash {:016x}\n", spec.spec_hash()));
    out.push_str(&format!("phi {} {}\n", params.phi_span.start, params.phi_span.end));
    out.push_str(&format!("head {} {}\n", params.head_span.start, params.head_span.end));
    out.push_str(&format!("count {}\n", params.len()));
    for v in &params.values {
        out.push_str(&format!("{v:?}\n"));
    }
    fs::write(path, out).map_err(|e| NptlError::io(path, e))
}

pub fn read_param_text(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ParamVector> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| NptlError::io(path, e))?;
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| format_err(path, format!("missing `{key}` line")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(format_err(path, format!("expected `{key}` line, got `{line}`")));
        }
        Ok(parts.map(str::to_owned).collect())
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad integer `{s}`")));
    let version = header("format")?;
    if version.first().map(String::as_str) != Some("1") {
        return Err(format_err(path, "unsupported text format version"));
    }
    let hash = header("spec_hash")?;
    if hash.first() != Some(&format!("{:016x}", spec.spec_hash())) {
        return Err(format_err(path, "spec hash does not match model spec"));
    }
    let phi = header("phi")?;
    let head = header("head")?;
    let count = parse(&header("count")?.concat())?;
    if phi.len() != 2 || head.len() != 2 {
        return Err(format_err(path, "span lines need two integers"));
    }
    let values = lines
        .map(|l| l.trim().parse::<f64>().map_err(|_| format_err(path, format!("bad value `{l}`"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != count {
        return Err(format_err(path, format!("expected {count} values, found {}", values.len())));
    }
    let params = ParamVector {
        values,
        phi_span: parse(&phi[0])?..parse(&phi[1])?,
        head_span: parse(&head[0])?..parse(&head[1])?,
    };
    spec.check_params(&params).map_err(|e| format_err(path, e.to_string()))?;
    Ok(params)
}
