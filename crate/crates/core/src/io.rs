//! On-disk formats.
//!
//! Matrix container (`.qrla`), all integers little-endian:
//!
//! ```text
//! magic   b"QRLA"
//! version u32 = 1
//! rows    u64
//! cols    u64
//! data    rows*cols f64, row-major
//! ```
//!
//! Adapter checkpoint (`.qrlc`):
//!
//! ```text
//! magic    b"QRLC"
//! version  u32 = 1
//! method   u8   0 = qr_lora, 1 = lora, 2 = svd_lora, 3 = full_ft
//! spec_len u32, then spec_len bytes of JSON (the AdapterSpec)
//! qr_lora:  r u64, r f64 lambda, m u64, m u64 perm, containers w0, q_basis, r_rows
//! lora/svd: scaling f64, containers w0, b, a
//! full_ft:  containers w0, weight
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapters::{AdapterSpec, AnyAdapter, FullWeight, LoraAdapter, Method, QrLoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"QRLA";
pub const MATRIX_VERSION: u32 = 1;
pub const ADAPTER_MAGIC: &[u8; 4] = b"QRLC";
pub const ADAPTER_VERSION: u32 = 1;

// Guards against absurd allocations from corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 32;

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    expect_magic(r, MATRIX_MAGIC)?;
    let version = read_u32(r)?;
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!("unsupported matrix version {version}")));
    }
    let rows = read_u64(r)?;
    let cols = read_u64(r)?;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n > 0 && n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format(format!("implausible matrix shape {rows}x{cols}")))?;
    let mut bytes = vec![0u8; n as usize * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

/// Parses comma-separated decimals, one matrix row per line. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_csv_matrix(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("line {}: bad number `{}`: {e}", lineno + 1, f.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("CSV contains no rows".into()));
    }
    Matrix::from_rows(&rows)
}

/// Loads a matrix, detecting the binary container by its magic and
/// falling back to CSV text otherwise.
pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MATRIX_MAGIC) {
        read_matrix(&mut bytes.as_slice())
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("neither a QRLA container nor UTF-8 CSV".into()))?;
        parse_csv_matrix(&text)
    }
}

fn method_tag(m: Method) -> u8 {
    match m {
        Method::QrLora => 0,
        Method::Lora => 1,
        Method::SvdLora => 2,
        Method::FullFt => 3,
    }
}

fn method_from_tag(t: u8) -> Result<Method> {
    Ok(match t {
        0 => Method::QrLora,
        1 => Method::Lora,
        2 => Method::SvdLora,
        3 => Method::FullFt,
        other => return Err(Error::Format(format!("unknown method tag {other}"))),
    })
}

pub fn write_adapter(w: &mut impl Write, spec: &AdapterSpec, adapter: &AnyAdapter) -> Result<()> {
    use crate::adapters::Adapter;
    w.write_all(ADAPTER_MAGIC)?;
    w.write_all(&ADAPTER_VERSION.to_le_bytes())?;
    w.write_all(&[method_tag(adapter.method())])?;
    let echo = serde_json::to_vec(spec)?;
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(&echo)?;
    match adapter {
        AnyAdapter::QrLora(a) => {
            w.write_all(&(a.rank() as u64).to_le_bytes())?;
            for v in a.lambda() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(a.perm().len() as u64).to_le_bytes())?;
            for &p in a.perm() {
                w.write_all(&(p as u64).to_le_bytes())?;
            }
            write_matrix(w, a.w0())?;
            write_matrix(w, a.q_basis())?;
            write_matrix(w, a.r_rows())?;
        }
        AnyAdapter::Lora(a) => {
            w.write_all(&a.scaling().to_le_bytes())?;
            write_matrix(w, a.base())?;
            write_matrix(w, a.b())?;
            write_matrix(w, a.a())?;
        }
        AnyAdapter::Full(a) => {
            write_matrix(w, a.base())?;
            write_matrix(w, a.weight())?;
        }
    }
    Ok(())
}

pub fn read_adapter(r: &mut impl Read) -> Result<(AdapterSpec, AnyAdapter)> {
    expect_magic(r, ADAPTER_MAGIC)?;
    let version = read_u32(r)?;
    if version != ADAPTER_VERSION {
        return Err(Error::Format(format!("unsupported adapter version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let method = method_from_tag(tag[0])?;
    let len = read_u32(r)? as usize;
    let mut echo = vec![0u8; len];
    r.read_exact(&mut echo)?;
    let spec: AdapterSpec = serde_json::from_slice(&echo)?;
    let adapter = match method {
        Method::QrLora => {
            let rank = read_u64(r)?;
            if rank > MAX_ELEMENTS {
                return Err(Error::Format(format!("implausible rank {rank}")));
            }
            let lambda = (0..rank).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let m = read_u64(r)?;
            if m > MAX_ELEMENTS {
                return Err(Error::Format(format!("implausible column count {m}")));
            }
            let perm = (0..m)
                .map(|_| read_u64(r).map(|p| p as usize))
                .collect::<Result<Vec<_>>>()?;
            let w0 = read_matrix(r)?;
            let q = read_matrix(r)?;
            let rr = read_matrix(r)?;
            AnyAdapter::QrLora(QrLoraAdapter::from_parts(w0, q, rr, perm, lambda)?)
        }
        Method::Lora | Method::SvdLora => {
            let scaling = read_f64(r)?;
            let w0 = read_matrix(r)?;
            let b = read_matrix(r)?;
            let a = read_matrix(r)?;
            AnyAdapter::Lora(LoraAdapter::from_parts(w0, b, a, scaling, method)?)
        }
        Method::FullFt => {
            let w0 = read_matrix(r)?;
            let weight = read_matrix(r)?;
            AnyAdapter::Full(FullWeight::from_parts(w0, weight)?)
        }
    };
    Ok((spec, adapter))
}

pub fn save_adapter(path: &Path, spec: &AdapterSpec, adapter: &AnyAdapter) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_adapter(&mut w, spec, adapter)?;
    w.flush()?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<(AdapterSpec, AnyAdapter)> {
    read_adapter(&mut BufReader::new(File::open(path)?))
}
