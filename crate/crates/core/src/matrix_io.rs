//! Matrix container shared by every command.
//!
//! Two encodings, both row-major:
//!
//! - CSV: first line `# rows cols`, then one comma-separated line per row.
//!   Values are written in Rust's shortest round-trip form, so a CSV
//!   round trip is bit-exact.
//! - Binary: 8-byte magic `EDDMAT01`, rows and cols as little-endian `u64`,
//!   then `rows * cols` little-endian `f64` values.
//!
//! [`read_matrix`] detects the encoding from the magic bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EDDMAT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Binary,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Binary => "bin",
        }
    }
}

pub fn encode_csv(m: &Array2<f64>) -> String {
    let mut out = format!("# {} {}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn encode_binary(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_csv(text: &str, path: &Path) -> Result<Array2<f64>> {
    let err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file; expected `# rows cols` header".into()))?;
    let dims: Vec<&str> = header
        .strip_prefix('#')
        .ok_or_else(|| err(1, format!("expected `# rows cols` header, found {header:?}")))?
        .split_whitespace()
        .collect();
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| err(1, format!("invalid dimension {s:?} in header")))
    };
    let (rows, cols) = match dims.as_slice() {
        [r, c] => (parse_dim(r)?, parse_dim(c)?),
        _ => return Err(err(1, format!("expected `# rows cols` header, found {header:?}"))),
    };

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if seen_rows == rows {
            return Err(err(lineno, format!("more than the {rows} rows declared in the header")));
        }
        let before = data.len();
        for field in line.split(',') {
            let field = field.trim();
            let v = field
                .parse::<f64>()
                .map_err(|_| err(lineno, format!("invalid number {field:?}")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(err(
                lineno,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(err(
            text.lines().count(),
            format!("expected {rows} rows, found {seen_rows}"),
        ));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| err(1, e.to_string()))
}

pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let err = |message: String| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(err("missing EDDMAT01 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| err(format!("dimensions {rows}x{cols} overflow")))?;
    let payload = &bytes[24..];
    if payload.len() != expected {
        return Err(err(format!(
            "expected {expected} payload bytes for {rows}x{cols}, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| err(e.to_string()))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: "neither EDDMAT01 binary nor UTF-8 CSV".into(),
        })?;
        decode_csv(&text, path)
    }
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        MatrixFormat::Csv => encode_csv(m).into_bytes(),
        MatrixFormat::Binary => encode_binary(m),
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Integer class labels: one or more comma-separated indices per line, `#`
/// comment lines ignored.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        for field in line.split(',') {
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            let v = field.parse::<usize>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("invalid class index {field:?}"),
            })?;
            labels.push(v);
        }
    }
    Ok(labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
