//! File output shared by runs, grids, sweeps, and diagnostics.
//!
//! Every CSV starts with a comment row `# clion <version> config_hash=<hash>`
//! followed by a fixed header row. JSON documents carry the same two values
//! as `tool_version` and `config_hash`. Floats are written in their shortest
//! round-trip form, so identical inputs give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const TOOL_NAME: &str = "clion";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CLION_OUT_DIR";

/// First 16 hex digits of the SHA-256 of the value's compact JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn header_comment(hash: &str) -> String {
    format!("# {TOOL_NAME} {TOOL_VERSION} config_hash={hash}")
}

/// Output directory: explicit argument, else [`OUT_DIR_ENV`], else `out`.
pub fn resolve_out_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Formats an optional float as a CSV cell; `None` and NaN become empty.
pub fn cell(x: Option<f64>) -> String {
    match x {
        Some(v) if !v.is_nan() => v.to_string(),
        _ => String::new(),
    }
}

pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self, hash: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        writeln!(buf, "{}", header_comment(hash))?;
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        drop(w);
        Ok(buf)
    }

    pub fn write(&self, path: &Path, hash: &str) -> Result<()> {
        write_bytes(path, &self.to_bytes(hash)?)
    }
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    tool: &'static str,
    tool_version: &'static str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn json_bytes<T: Serialize>(value: &T, hash: &str) -> Result<Vec<u8>> {
    let stamped = Stamped { tool: TOOL_NAME, tool_version: TOOL_VERSION, config_hash: hash, body: value };
    let mut out = serde_json::to_vec_pretty(&stamped)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, hash: &str) -> Result<()> {
    write_bytes(path, &json_bytes(value, hash)?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}
