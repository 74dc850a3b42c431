//! JSON-lines tuning journal and per-iteration reports.
//!
//! One [`TuningIteration`] per line, written and flushed as soon as the
//! iteration completes, so an interrupted loop can resume from the file.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::TuningIteration;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: expected iteration {expected}, found {found}")]
    OutOfOrder {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
}

pub fn parse_journal(text: &str, path: &Path) -> Result<Vec<TuningIteration>, JournalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let it: TuningIteration = serde_json::from_str(line).map_err(|source| JournalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        if it.index != out.len() {
            return Err(JournalError::OutOfOrder {
                path: path.to_path_buf(),
                line: i + 1,
                expected: out.len(),
                found: it.index,
            });
        }
        out.push(it);
    }
    Ok(out)
}

pub fn read_journal(path: &Path) -> Result<Vec<TuningIteration>, JournalError> {
    let io_err = |source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = String::new();
    let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
    loop {
        let mut line = String::new();
        // a torn final line from an interrupted write is dropped
        let n = reader.read_line(&mut line).map_err(io_err)?;
        if n == 0 {
            break;
        }
        if line.ends_with('\n') {
            text.push_str(&line);
        }
    }
    parse_journal(&text, path)
}

pub fn iteration_line(it: &TuningIteration) -> String {
    serde_json::to_string(it).expect("iterations serialize")
}

/// Append-only journal file.
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens for appending, creating the file when missing.
    pub fn append(path: &Path) -> Result<Self, JournalError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| JournalError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Journal {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Truncates any existing file.
    pub fn create(path: &Path) -> Result<Self, JournalError> {
        File::create(path).map_err(|source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::append(path)
    }

    pub fn write(&mut self, it: &TuningIteration) -> Result<(), JournalError> {
        let mut line = iteration_line(it);
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|source| JournalError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

pub const REPORT_CSV_HEADER: &str = "iteration,accepted,throughput_ops_s,p99_us,changed_options";

/// One row per iteration. Floats use the shortest representation that
/// parses back to the same value.
pub fn report_csv(history: &[TuningIteration]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for it in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            it.index,
            it.accepted,
            it.result.overall_throughput_ops_s,
            it.result.overall_p99_us,
            it.delta_from_prev.len()
        ));
    }
    out
}

/// The CSV columns as a right-aligned text table, plus a best-iteration line.
pub fn report_text(history: &[TuningIteration]) -> String {
    let headers = ["iteration", "accepted", "throughput_ops_s", "p99_us", "changed_options"];
    let rows: Vec<[String; 5]> = history
        .iter()
        .map(|it| {
            [
                it.index.to_string(),
                if it.accepted { "yes".into() } else { "no".into() },
                it.result.overall_throughput_ops_s.to_string(),
                it.result.overall_p99_us.to_string(),
                it.delta_from_prev.len().to_string(),
            ]
        })
        .collect();
    let mut widths = headers.map(str::len);
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: [&str; 5]| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:>w$}")).collect();
        parts.join("  ")
    };
    out.push_str(&line(headers));
    out.push('\n');
    for r in &rows {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
        out.push('\n');
    }
    if let Some(best) = super::best_iteration(history) {
        out.push_str(&format!(
            "best: iteration {} at {} ops/s\n",
            best.index, best.result.overall_throughput_ops_s
        ));
    }
    out
}
