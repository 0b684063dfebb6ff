//! Append-only CSV logs with a provenance comment line and resume truncation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub struct CsvLog {
    file: File,
    path: std::path::PathBuf,
}

impl CsvLog {
    /// Open `path` for appending rows under `header`. When `resume_from > 0`
    /// an existing log keeps its rows whose first field is `<= resume_from`;
    /// otherwise the file is started afresh.
    pub fn open(
        path: &Path,
        header: &str,
        config_hash: &str,
        seed: u64,
        resume_from: u64,
    ) -> Result<Self> {
        let mut kept = String::new();
        if resume_from > 0 {
            if let Ok(text) = fs::read_to_string(path) {
                for line in text.lines() {
                    let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                        Some(step) => step <= resume_from,
                        None => true,
                    };
                    if keep {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        if kept.is_empty() {
            kept = format!("# config_hash={config_hash} seed={seed}\n{header}\n");
        }
        fs::write(path, &kept).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Data rows of a log written by [`CsvLog`], split on commas.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::format("csv", "header", "missing"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}
