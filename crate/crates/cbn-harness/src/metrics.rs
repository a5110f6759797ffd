//! Metrics rows and their CSV serialization.
//!
//! Columns are fixed: `epoch,iteration,split,loss,top1,wall_time_s,effective_window`.
//! Floats are printed with 17 significant digits in scientific notation, which
//! round-trips every finite `f64` exactly and never depends on locale. The
//! wall-time column is measured, not derived, so determinism comparisons
//! exclude it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{io_err, HarnessError, HarnessResult};

pub const METRICS_HEADER: &str = "epoch,iteration,split,loss,top1,wall_time_s,effective_window";

/// Index of the wall-time column, the one excluded from determinism checks.
pub const WALL_TIME_COLUMN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn token(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub iteration: u64,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub wall_time_s: f64,
    pub effective_window: u64,
}

/// 17 significant digits: enough to reproduce any `f64` bit-exactly on parse.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.iteration,
            self.split.token(),
            format_f64(self.loss),
            format_f64(self.top1),
            format_f64(self.wall_time_s),
            self.effective_window
        )
    }

    pub fn parse(line: &str, path: &Path, line_no: usize) -> HarnessResult<MetricsRow> {
        let mk_err = |msg: String| HarnessError::Format {
            path: path.to_path_buf(),
            offset: line_no as u64,
            message: format!("line {line_no}: {msg}"),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(mk_err(format!("expected 7 fields, got {}", fields.len())));
        }
        let split = match fields[2] {
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => return Err(mk_err(format!("unknown split {other:?}"))),
        };
        let parse_u = |s: &str, name: &str| {
            s.parse::<u64>()
                .map_err(|e| mk_err(format!("bad {name} {s:?}: {e}")))
        };
        let parse_f = |s: &str, name: &str| {
            s.parse::<f64>()
                .map_err(|e| mk_err(format!("bad {name} {s:?}: {e}")))
        };
        Ok(MetricsRow {
            epoch: parse_u(fields[0], "epoch")?,
            iteration: parse_u(fields[1], "iteration")?,
            split,
            loss: parse_f(fields[3], "loss")?,
            top1: parse_f(fields[4], "top1")?,
            wall_time_s: parse_f(fields[5], "wall_time_s")?,
            effective_window: parse_u(fields[6], "effective_window")?,
        })
    }
}

/// Append-oriented CSV writer that counts the data rows it has written.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    rows: u64,
}

impl MetricsWriter {
    /// Creates the file and writes the header.
    pub fn create(path: &Path) -> HarnessResult<MetricsWriter> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| io_err(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out,
            rows: 0,
        })
    }

    /// Reopens an existing file for appending, first truncating it to exactly
    /// `keep_rows` data rows (a crashed run may have rows written after the
    /// checkpoint being resumed from).
    pub fn reopen(path: &Path, keep_rows: u64) -> HarnessResult<MetricsWriter> {
        let rows = read_metrics(path)?;
        if (rows.len() as u64) < keep_rows {
            return Err(HarnessError::Argument(format!(
                "{} holds {} rows but the checkpoint expects at least {keep_rows}",
                path.display(),
                rows.len()
            )));
        }
        let mut text = String::from(METRICS_HEADER);
        text.push('\n');
        for row in rows.iter().take(keep_rows as usize) {
            text.push_str(&row.to_csv_line());
            text.push('\n');
        }
        std::fs::write(path, &text).map_err(|e| io_err(path, e))?;
        let file = File::options()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            rows: keep_rows,
        })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> HarnessResult<()> {
        writeln!(self.out, "{}", row.to_csv_line()).map_err(|e| io_err(&self.path, e))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows_written(&self) -> u64 {
        self.rows
    }

    pub fn flush(&mut self) -> HarnessResult<()> {
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> HarnessResult<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        other => {
            return Err(HarnessError::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("bad header {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        rows.push(MetricsRow::parse(line, path, i + 1)?);
    }
    Ok(rows)
}

/// Removes the wall-time column from CSV text, for byte-level comparisons of
/// runs that should be identical except for measured durations.
pub fn strip_wall_time(csv_text: &str) -> String {
    let mut out = String::with_capacity(csv_text.len());
    for line in csv_text.lines() {
        let mut first = true;
        for (i, field) in line.split(',').enumerate() {
            if i == WALL_TIME_COLUMN {
                continue;
            }
            if !first {
                out.push(',');
            }
            out.push_str(field);
            first = false;
        }
        out.push('\n');
    }
    out
}

/// True when two row sets agree everywhere except wall time, with float
/// comparisons at the given absolute tolerance.
pub fn rows_match(a: &[MetricsRow], b: &[MetricsRow], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.epoch == y.epoch
                && x.iteration == y.iteration
                && x.split == y.split
                && x.effective_window == y.effective_window
                && (x.loss - y.loss).abs() <= tol
                && (x.top1 - y.top1).abs() <= tol
        })
}
