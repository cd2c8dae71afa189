//! Append-only JSON-lines metric streams.
//!
//! The first line is a header carrying the resolved config; every later
//! line is one record with a strictly increasing `step`. Each line is
//! written whole and flushed, so a crash leaves at most one truncated line,
//! which readers skip and resumption discards.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::msm::LossBreakdown;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub l_ctr: f64,
    pub l_div: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub l_scaled: f64,
    pub codebook_usage_pct: f64,
    pub msm_accuracy: f64,
    pub realized_coverage: f64,
    pub mean_masked_confidence: Option<f64>,
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn new(step: u64, b: &LossBreakdown, wall_ms: Option<u64>) -> Self {
        MetricsRecord {
            step,
            l_ctr: b.l_ctr,
            l_div: b.l_div,
            l_ce: b.l_ce,
            l_total: b.l_total,
            l_scaled: b.l_scaled,
            codebook_usage_pct: b.codebook_usage_pct,
            msm_accuracy: b.msm_accuracy,
            realized_coverage: b.realized_coverage,
            mean_masked_confidence: b.mean_masked_confidence,
            wall_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub command: String,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

#[derive(Deserialize)]
struct StepOnly {
    step: u64,
}

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Starts a fresh stream, replacing any existing file.
    pub fn create(path: &Path, header: &Header) -> Result<Self> {
        let file = File::create(path).map_err(|e| AtmError::io(path, e))?;
        let mut w = MetricsWriter {
            file,
            path: path.to_path_buf(),
            last_step: None,
        };
        w.write_line(&HeaderLine { header: header.clone() })?;
        Ok(w)
    }

    /// Reopens a stream, keeping complete records up to `through` and
    /// dropping everything after them, including a truncated tail.
    pub fn resume(path: &Path, header: &Header, through: u64) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Self::create(path, header),
            Err(e) => return Err(AtmError::io(path, e)),
        };
        let mut kept = String::new();
        let mut last_step = None;
        for line in complete_lines(&text) {
            if serde_json::from_str::<HeaderLine>(line).is_ok() {
                if kept.is_empty() {
                    kept.push_str(line);
                    kept.push('\n');
                }
                continue;
            }
            match serde_json::from_str::<StepOnly>(line) {
                Ok(r) if r.step <= through && last_step.is_none_or(|s| r.step > s) => {
                    kept.push_str(line);
                    kept.push('\n');
                    last_step = Some(r.step);
                }
                Ok(_) => break,
                Err(e) => {
                    log::warn!("{}: dropping unreadable line on resume: {e}", path.display());
                    break;
                }
            }
        }
        if kept.is_empty() {
            return Self::create(path, header);
        }
        fs::write(path, &kept).map_err(|e| AtmError::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| AtmError::io(path, e))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
            last_step,
        })
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    pub fn append<T: Serialize>(&mut self, step: u64, record: &T) -> Result<()> {
        if self.last_step.is_some_and(|s| step <= s) {
            return Err(AtmError::Contract(format!(
                "{}: step {step} does not follow {}",
                self.path.display(),
                self.last_step.unwrap_or(0)
            )));
        }
        self.write_line(record)?;
        self.last_step = Some(step);
        Ok(())
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value).map_err(|e| AtmError::json(&self.path, e))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| AtmError::io(&self.path, e))?;
        self.file.flush().map_err(|e| AtmError::io(&self.path, e))
    }
}

/// Lines terminated by a newline; an unterminated tail is a torn write.
fn complete_lines(text: &str) -> impl Iterator<Item = &str> {
    let end = text.rfind('\n').map_or(0, |i| i + 1);
    text[..end].lines().filter(|l| !l.trim().is_empty())
}

/// Header and records of a stream, ignoring a truncated final line.
pub fn read_metrics<T: DeserializeOwned>(path: &Path) -> Result<(Option<Header>, Vec<T>)> {
    let text = fs::read_to_string(path).map_err(|e| AtmError::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for line in complete_lines(&text) {
        if let Ok(h) = serde_json::from_str::<HeaderLine>(line) {
            header.get_or_insert(h.header);
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| AtmError::json(path, e))?);
    }
    Ok((header, records))
}
