//! File output: CSV cells, JSON documents and per-command manifests.
//!
//! Every command writes its files and then a `<command>.manifest` listing
//! each file with an FNV-1a checksum. The manifest's first line carries the
//! wall-clock timestamp; it is the only non-deterministic byte range of a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tac_core::data::fmt_real;
use tac_core::rng::fnv1a64;

use crate::error::{CliError, Result};

/// Collects the files of one command run.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, u64)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.push((name.to_string(), fnv1a64(bytes)));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file that some other writer already created.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.files.push((name.to_string(), fnv1a64(&bytes)));
        Ok(())
    }

    pub fn finish(self, command: &str) -> Result<PathBuf> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut text = format!("# created_unix {secs}\ncommand {command}\n");
        for (name, sum) in &self.files {
            writeln!(text, "file {name} {sum:016x}").unwrap();
        }
        let path = self.dir.join(format!("{command}.manifest"));
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// A real CSV cell: 17 significant digits, empty when undefined.
pub fn cell(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

pub fn parse_cell(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        return Ok(None);
    }
    match s {
        "inf" => Ok(Some(f64::INFINITY)),
        "-inf" => Ok(Some(f64::NEG_INFINITY)),
        _ => s.parse().map(Some).map_err(|_| format!("bad number '{s}'")),
    }
}

/// Maps NaN to `None` so JSON reports undefined values as `null`.
pub fn defined(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_round_trip() {
        for x in [0.1 + 0.2, -1e-300, 12345.678, f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(parse_cell(&cell(Some(x))).unwrap(), Some(x));
        }
        assert_eq!(parse_cell(&cell(None)).unwrap(), None);
        assert!(parse_cell("x").is_err());
    }
}
