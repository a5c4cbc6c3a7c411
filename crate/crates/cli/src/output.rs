//! Deterministic artifact emission: sorted-key JSON, RFC-4180 CSV with 17
//! significant digits, gnuplot recipe files, and the run manifest.

use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::CliError;

/// Record of one invocation, written to <out>/manifest.json before any
/// compute starts. Output file names are relative to the manifest's
/// directory so reruns into different directories stay byte-identical.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub config_hash: String,
    pub seed: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn write(
        command: &str,
        config: &Config,
        seed: u64,
        out_dir: &Path,
        outputs: &[&str],
    ) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: command.to_string(),
            config: config.clone(),
            config_hash: content_hash(config)?,
            seed,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
        write_json(&out_dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn path_of(&self, out_dir: &Path, name: &str) -> PathBuf {
        debug_assert!(self.outputs.iter().any(|o| o == name));
        out_dir.join(name)
    }
}

/// FNV-1a hash of the canonical (sorted-key) JSON encoding of the config.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String, CliError> {
    let canonical = to_sorted_json(value)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// Serialize with keys sorted at every level (via the Value intermediate,
/// whose object map is ordered) and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v: Value = serde_json::to_value(value)
        .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
    let mut text = serde_json::to_string_pretty(&v)
        .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_sorted_json(value)?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// One float cell: scientific notation, 17 significant digits, '.' decimal.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write an RFC-4180 CSV: header row, CRLF line endings, no quoting needed
/// for the numeric payloads emitted here.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push_str("\r\n");
    for row in rows {
        text.push_str(&row.join(","));
        text.push_str("\r\n");
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Companion gnuplot recipe referencing the manifest and its data file.
pub fn write_recipe(
    path: &Path,
    manifest: &RunManifest,
    body: &str,
) -> Result<(), CliError> {
    let text = format!(
        "# gnuplot recipe emitted by ictxot {}\n# manifest: manifest.json (config {})\n{}",
        manifest.command, manifest.config_hash, body
    );
    std::fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}
