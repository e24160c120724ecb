//! The per-run metrics table.
//!
//! One CSV per run, one row per evaluation:
//! `step,seed,iqm_return,iqm_success,ci_lo,ci_hi,critic_loss,policy_loss,alpha`.
//! `ci_lo`/`ci_hi` bound the IQM of the evaluation returns. Floats are
//! written with Rust's shortest round-trip formatting, so identical runs
//! produce byte-identical files.

use std::io::{BufRead, Write};
use thiserror::Error;

pub const METRICS_HEADER: &str =
    "step,seed,iqm_return,iqm_success,ci_lo,ci_hi,critic_loss,policy_loss,alpha";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub seed: u64,
    pub iqm_return: f64,
    pub iqm_success: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.seed,
            self.iqm_return,
            self.iqm_success,
            self.ci_lo,
            self.ci_hi,
            self.critic_loss,
            self.policy_loss,
            self.alpha
        )
    }
}

/// Appends rows as they arrive; writes the header on creation.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self, MetricsError> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a metrics CSV, reporting the line number of the first defect.
pub fn read_metrics(r: impl BufRead) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rows = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if lineno == 1 {
            if line.trim() != METRICS_HEADER {
                return Err(MetricsError::Malformed {
                    line: 1,
                    msg: format!("bad header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(MetricsError::Malformed {
                line: lineno,
                msg: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let int = |i: usize| -> Result<u64, MetricsError> {
            fields[i].trim().parse().map_err(|_| MetricsError::Malformed {
                line: lineno,
                msg: format!("bad integer `{}`", fields[i]),
            })
        };
        let num = |i: usize| -> Result<f64, MetricsError> {
            fields[i].trim().parse().map_err(|_| MetricsError::Malformed {
                line: lineno,
                msg: format!("bad number `{}`", fields[i]),
            })
        };
        rows.push(MetricsRow {
            step: int(0)?,
            seed: int(1)?,
            iqm_return: num(2)?,
            iqm_success: num(3)?,
            ci_lo: num(4)?,
            ci_hi: num(5)?,
            critic_loss: num(6)?,
            policy_loss: num(7)?,
            alpha: num(8)?,
        });
    }
    Ok(rows)
}
