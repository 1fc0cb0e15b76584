//! Optimizer comparison protocols.
//!
//! Effectiveness: L-BFGS-B runs 100 iterations taking `T_ref` and reaching
//! `loss_ref`; the learned optimizer then gets `T_ref` seconds and
//! `(loss_ref − loss_l2o)/loss_ref` is reported. Efficiency: the learned
//! optimizer runs until it reaches `loss_ref` at time `T_l2o`;
//! `(T_ref − T_l2o)/T_ref` is reported, or a failure when the target is not
//! reached within three times `T_ref`. Both are plain functions of the two
//! traces and are never clamped.

use std::path::Path;
use std::sync::Arc;

use pbs_core::lbfgsb::{minimize, Bounds, LbfgsbOptions};
use pbs_core::problem::PlanProblem;
use pbs_core::trace::{Budget, RunTrace, TraceEntry};
use pbs_l2o::{l2o_minimize, L2ONetwork, L2OOptions};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const REFERENCE_ITERATIONS: usize = 100;
pub const EFFICIENCY_TIME_FACTOR: f64 = 3.0;

/// Percentage `(loss_ref − loss_l2o)/loss_ref · 100`.
pub fn effectiveness(loss_ref: f64, loss_l2o: f64) -> f64 {
    100.0 * (loss_ref - loss_l2o) / loss_ref
}

/// Percentage `(t_ref − t_l2o)/t_ref · 100`.
pub fn efficiency(t_ref: f64, t_l2o: f64) -> f64 {
    100.0 * (t_ref - t_l2o) / t_ref
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub seconds: f64,
    pub loss_min: f64,
}

impl TraceSummary {
    pub fn of(entries: &[TraceEntry]) -> Self {
        let last = entries.last();
        Self {
            iterations: last.map_or(0, |e| e.iter),
            seconds: last.map_or(0.0, |e| e.seconds),
            loss_min: entries.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub case: String,
    pub reference: TraceSummary,
    pub l2o: TraceSummary,
    /// Percentage; absent when the efficiency target was never reached.
    pub metric: Option<f64>,
}

/// Effectiveness from the reference trace and a time-limited learned trace.
pub fn effectiveness_case(case: &str, reference: &[TraceEntry], l2o: &[TraceEntry]) -> BenchCase {
    let r = TraceSummary::of(reference);
    let budget = r.seconds;
    let within: Vec<TraceEntry> = l2o.iter().filter(|e| e.seconds <= budget || e.iter == 0).cloned().collect();
    let l = TraceSummary::of(&within);
    BenchCase { case: case.into(), metric: Some(effectiveness(r.loss_min, l.loss_min)), reference: r, l2o: l }
}

/// Efficiency from the reference trace and a learned trace run toward the
/// reference loss. The learned summary stops at the first entry reaching it.
pub fn efficiency_case(case: &str, reference: &[TraceEntry], l2o: &[TraceEntry]) -> BenchCase {
    let r = TraceSummary::of(reference);
    let limit = EFFICIENCY_TIME_FACTOR * r.seconds;
    match l2o.iter().position(|e| e.loss <= r.loss_min) {
        Some(i) if l2o[i].seconds <= limit => {
            let l = TraceSummary::of(&l2o[..=i]);
            BenchCase { case: case.into(), metric: Some(efficiency(r.seconds, l.seconds)), reference: r, l2o: l }
        }
        _ => BenchCase { case: case.into(), reference: r, l2o: TraceSummary::of(l2o), metric: None },
    }
}

/// Arithmetic mean of the reported metrics (failures excluded).
pub fn overall(cases: &[BenchCase]) -> Option<f64> {
    let v: Vec<f64> = cases.iter().filter_map(|c| c.metric).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Effectiveness,
    Efficiency,
}

impl Protocol {
    pub fn metric_name(self) -> &'static str {
        match self {
            Protocol::Effectiveness => "effectiveness",
            Protocol::Efficiency => "efficiency",
        }
    }
}

/// Writes one row per optimizer per case:
/// `case, optimizer, iterations, seconds, loss_min, <metric>`; the metric
/// sits on the learned-optimizer row, `failed` when unreached.
pub fn write_bench_csv(cases: &[BenchCase], protocol: Protocol, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["case", "optimizer", "iterations", "seconds", "loss_min", protocol.metric_name()])?;
    for c in cases {
        for (name, s, metric) in [
            ("lbfgsb", &c.reference, String::new()),
            ("l2o", &c.l2o, c.metric.map_or_else(|| "failed".to_string(), |m| format!("{m:.2}"))),
        ] {
            w.write_record([
                c.case.clone(),
                name.to_string(),
                s.iterations.to_string(),
                format!("{:.4}", s.seconds),
                format!("{:.6}", s.loss_min),
                metric,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct BenchRun {
    pub case: BenchCase,
    pub reference: RunTrace,
    pub l2o: RunTrace,
}

fn reference_run(problem: &PlanProblem, x0: &[f64]) -> Result<RunTrace> {
    Ok(minimize(
        problem,
        x0,
        &Bounds::for_problem(problem),
        Budget::iterations(REFERENCE_ITERATIONS),
        &LbfgsbOptions::default(),
    )?)
}

/// Runs both optimizers for the effectiveness protocol. Runs are
/// sequential so timings are not co-scheduled.
pub fn bench_effectiveness(case: &str, problem: Arc<PlanProblem>, net: &L2ONetwork) -> Result<BenchRun> {
    let x0 = problem.default_start();
    let reference = reference_run(&problem, &x0)?;
    let l2o = l2o_minimize(problem, net, &x0, Budget::seconds(reference.seconds()), &L2OOptions::default())?;
    let case = effectiveness_case(case, &reference.entries, &l2o.entries);
    Ok(BenchRun { case, reference, l2o })
}

pub fn bench_efficiency(case: &str, problem: Arc<PlanProblem>, net: &L2ONetwork) -> Result<BenchRun> {
    let x0 = problem.default_start();
    let reference = reference_run(&problem, &x0)?;
    let target = TraceSummary::of(&reference.entries).loss_min;
    let budget = Budget::seconds(EFFICIENCY_TIME_FACTOR * reference.seconds()).with_target_loss(target);
    let l2o = l2o_minimize(problem, net, &x0, budget, &L2OOptions::default())?;
    let case = efficiency_case(case, &reference.entries, &l2o.entries);
    Ok(BenchRun { case, reference, l2o })
}
