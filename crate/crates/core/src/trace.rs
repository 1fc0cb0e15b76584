//! Per-iteration optimizer traces and run budgets.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ProblemError, Result};

/// Stopping budget. Whichever limit triggers first ends the run; at least
/// one limit should be set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_iters: Option<usize>,
    pub max_seconds: Option<f64>,
    pub target_loss: Option<f64>,
}

impl Budget {
    pub fn iterations(n: usize) -> Self {
        Self {
            max_iters: Some(n),
            ..Self::default()
        }
    }

    pub fn seconds(s: f64) -> Self {
        Self {
            max_seconds: Some(s),
            ..Self::default()
        }
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = Some(n);
        self
    }

    pub fn with_max_seconds(mut self, s: f64) -> Self {
        self.max_seconds = Some(s);
        self
    }

    pub fn with_target_loss(mut self, loss: f64) -> Self {
        self.target_loss = Some(loss);
        self
    }

    /// Checks the budget after an iteration has been recorded.
    pub fn exhausted(&self, iteration: usize, seconds: f64, loss: f64) -> Option<Termination> {
        if self.target_loss.is_some_and(|t| loss <= t) {
            Some(Termination::TargetLoss)
        } else if self.max_iters.is_some_and(|n| iteration >= n) {
            Some(Termination::MaxIters)
        } else if self.max_seconds.is_some_and(|s| seconds >= s) {
            Some(Termination::MaxSeconds)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIters,
    MaxSeconds,
    TargetLoss,
    /// Projected gradient below tolerance.
    Converged,
    LineSearchFailed,
    NonFinite(String),
}

impl Termination {
    pub fn is_failure(&self) -> bool {
        matches!(self, Termination::LineSearchFailed | Termination::NonFinite(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub loss: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
}

/// Loss and cumulative wall time per iteration. Entry 0 is the starting
/// point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub entries: Vec<TraceEntry>,
    pub termination: Termination,
    pub final_x: Vec<f64>,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.entries.last().map_or(0, |e| e.iter)
    }

    pub fn final_loss(&self) -> f64 {
        self.entries.last().map_or(f64::NAN, |e| e.loss)
    }

    pub fn seconds(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.seconds)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_trace_csv(&self.entries, path)
    }
}

/// Writes `iter,loss,seconds`.
pub fn write_trace_csv(entries: &[TraceEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "loss", "seconds"])?;
    for e in entries {
        w.write_record([e.iter.to_string(), e.loss.to_string(), e.seconds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| ProblemError::InvalidProblem(format!("trace row missing column {i}")))
        };
        let parse_err = |e: std::num::ParseFloatError| ProblemError::InvalidProblem(e.to_string());
        out.push(TraceEntry {
            iter: field(0)?
                .parse()
                .map_err(|e: std::num::ParseIntError| ProblemError::InvalidProblem(e.to_string()))?,
            loss: field(1)?.parse().map_err(parse_err)?,
            seconds: field(2)?.parse().map_err(parse_err)?,
            x: None,
        });
    }
    Ok(out)
}

/// Monotone wall clock for traces.
pub struct TraceClock {
    start: Instant,
    last: f64,
}

impl TraceClock {
    pub fn start() -> Self {
        Self {
            start: Instant::now(),
            last: 0.0,
        }
    }

    pub fn elapsed(&mut self) -> f64 {
        let now = self.start.elapsed().as_secs_f64().max(self.last);
        self.last = now;
        now
    }
}
