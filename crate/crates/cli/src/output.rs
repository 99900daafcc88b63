//! Buffered command outputs. Nothing touches the disk until a command has
//! finished computing, so a failed run leaves no partial files behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use edd_core::matrix_io::{encode_binary, encode_csv, MatrixFormat};
use edd_core::{Error, Result};
use ndarray::Array2;
use serde::Serialize;

use crate::args::MatrixFormatArg;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn text(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents.into_bytes()));
    }

    pub fn json(&mut self, name: impl Into<String>, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
        Ok(())
    }

    /// Adds `<stem>.csv` or `<stem>.bin`.
    pub fn matrix(&mut self, stem: &str, m: &Array2<f64>, format: MatrixFormatArg) {
        let (format, bytes) = match format {
            MatrixFormatArg::Csv => (MatrixFormat::Csv, encode_csv(m).into_bytes()),
            MatrixFormatArg::Bin => (MatrixFormat::Binary, encode_binary(m)),
        };
        self.files.push((format!("{stem}.{}", format.extension()), bytes));
    }

    /// Writes every file into `dir`, then the manifest.
    pub fn write(self, dir: &Path, mut manifest: Manifest, elapsed: Duration) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut written = Vec::with_capacity(self.files.len() + 1);
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| io(&path, e))?;
            written.push(path);
        }
        manifest.outputs = self.files.iter().map(|(n, _)| n.clone()).collect();
        manifest.wall_clock_seconds = elapsed.as_secs_f64();
        let path = dir.join(MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Record of one invocation. Everything except `wall_clock_seconds` is a
/// function of the parameters.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub parameters: serde_json::Value,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl Manifest {
    pub fn new(command: &str, parameters: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            parameters: serde_json::to_value(parameters)?,
            seeds,
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
        })
    }
}

/// Heatmap CSV: header `sigma\lambda,<λ_0>,...`, then one row per σ.
pub fn heatmap_csv(lambdas: &[f64], sigmas: &[f64], values: &Array2<f64>) -> String {
    let mut out = String::from("sigma\\lambda");
    for l in lambdas {
        out.push_str(&format!(",{l:?}"));
    }
    out.push('\n');
    for (s, row) in sigmas.iter().zip(values.rows()) {
        out.push_str(&format!("{s:?}"));
        for v in row {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}
