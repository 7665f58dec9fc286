//! Result files. Every JSON output is wrapped in an envelope carrying the
//! schema version and the config digest; `manifest.json` records the digest
//! and a sha256 for every file written, including the CSVs. `generated_at`
//! is the only nondeterministic field and is left out of the file hashes.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::{CliError, Format};

pub const TIMESTAMP_FIELD: &str = "generated_at";

pub struct Context {
    pub out_dir: PathBuf,
    pub format: Format,
    pub command: &'static str,
    pub digest: String,
    pub seed: Option<u64>,
    written: RefCell<Vec<(String, String)>>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config_digest: &'a str,
    seed: Option<u64>,
    generated_at: String,
    results: T,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    file: &'a str,
    sha256: &'a str,
}

fn now() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

impl Context {
    pub fn new(cfg: &ExperimentConfig, out_dir: PathBuf, format: Format, command: &'static str) -> Self {
        Self {
            out_dir,
            format,
            command,
            digest: cfg.digest(),
            seed: cfg.seed,
            written: RefCell::new(Vec::new()),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.written
            .borrow_mut()
            .push((name.to_string(), hex::encode(Sha256::digest(without_timestamp(bytes)))));
        Ok(path)
    }

    pub fn envelope<T: Serialize>(&self, results: T) -> Result<String, CliError> {
        let env = Envelope {
            schema_version: SCHEMA_VERSION,
            command: self.command,
            config_digest: &self.digest,
            seed: self.seed,
            generated_at: now(),
            results,
        };
        serde_json::to_string_pretty(&env)
            .map(|s| s + "\n")
            .map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, results: T) -> Result<PathBuf, CliError> {
        let text = self.envelope(results)?;
        self.write_bytes(name, text.as_bytes())
    }

    /// Rows in the configured format: CSV with header, or a JSON envelope.
    pub fn render_rows<T: Serialize>(&self, rows: &[T]) -> Result<String, CliError> {
        match self.format {
            Format::Csv => csv_string(rows),
            Format::Json => self.envelope(rows),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self.format {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }

    /// Write `manifest.json` for everything written so far.
    pub fn finish(&self) -> Result<(), CliError> {
        let written = self.written.borrow().clone();
        let entries: Vec<ManifestEntry> = written
            .iter()
            .map(|(f, h)| ManifestEntry { file: f, sha256: h })
            .collect();
        let text = self.envelope(entries)?;
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.path("manifest.json"), text)?;
        Ok(())
    }
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Bytes of an output with the timestamp line removed. Envelopes are
/// pretty-printed, so the timestamp always sits on its own line.
pub fn without_timestamp(bytes: &[u8]) -> Vec<u8> {
    let key = format!("\"{TIMESTAMP_FIELD}\":");
    let mut out = Vec::with_capacity(bytes.len());
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let trimmed = line.trim_ascii_start();
        if !trimmed.starts_with(key.as_bytes()) {
            out.extend_from_slice(line);
        }
    }
    out
}

/// Byte comparison of two output files, ignoring the timestamp.
pub fn outputs_match(a: &Path, b: &Path) -> std::io::Result<bool> {
    Ok(without_timestamp(&std::fs::read(a)?) == without_timestamp(&std::fs::read(b)?))
}
