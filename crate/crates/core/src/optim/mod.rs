//! Black-box minimizers for latent-space search.
//!
//! Three strategies share one result contract:
//!
//! * [`cmaes`]: evolution strategy with full covariance adaptation,
//! * [`turbo`]: trust-region Bayesian optimization with a Gaussian-process
//!   surrogate, box-constrained,
//! * [`fd_adam`]: Adam on central-finite-difference gradient estimates, the
//!   gradient-based baseline.
//!
//! Objectives must be pure (same input, same output) and finite on every
//! finite input; a non-finite value aborts the run naming the offending
//! evaluation. CMA-ES and Adam search an unconstrained preimage and pass
//! candidates through `z = b * tanh(u)` when a bound is configured; TuRBO
//! works natively inside its box.
//!
//! Candidate batches may evaluate in parallel. Results are collected by
//! candidate index and all state updates happen single-threaded, so a run
//! is byte-identical regardless of thread count.

pub mod cmaes;
pub mod fd_adam;
pub mod turbo;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective evaluated by the minimizers.
pub type Objective<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// One row of the per-generation progress trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1-based generation (or step, or batch) counter.
    pub generation: usize,
    /// Total objective evaluations consumed so far.
    pub evaluations: usize,
    /// Best value seen so far; non-increasing down the trace.
    pub best_value: f64,
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GenerationLimit,
    EvaluationBudget,
    TargetReached,
    /// Trust region shrank below its minimum width.
    RegionCollapsed,
}

/// Outcome of a minimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptRun {
    /// Best point in the objective's own coordinates (post-squashing).
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
    pub trace: Vec<TraceEntry>,
    pub termination: Termination,
}

/// Renders a trace as CSV. Values carry 17 significant digits so the file
/// round-trips `f64` exactly.
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("generation,evaluations,best_value\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{:.16e}\n",
            row.generation, row.evaluations, row.best_value
        ));
    }
    out
}

/// Evaluates a batch of points, in parallel, preserving candidate order.
/// `evals_before` seeds the global evaluation index used in error reports.
pub(crate) fn evaluate_batch(
    f: Objective,
    points: &[Vec<f64>],
    evals_before: usize,
) -> Result<Vec<f64>> {
    let values: Vec<f64> = points.par_iter().map(|p| f(p)).collect();
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective {
                index: evals_before + i,
            });
        }
    }
    Ok(values)
}

/// Maps an unconstrained point into the evaluation space.
pub(crate) fn squash(u: &[f64], bound: Option<f64>) -> Vec<f64> {
    match bound {
        Some(b) => u.iter().map(|v| b * v.tanh()).collect(),
        None => u.to_vec(),
    }
}

pub(crate) fn validate_bound(bound: Option<f64>) -> Result<()> {
    if let Some(b) = bound {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "latent bound must be positive and finite, got {b}"
            )));
        }
    }
    Ok(())
}

/// Ranks candidate indices by ascending value, ties broken by index so the
/// ordering is total and schedule-independent.
pub(crate) fn rank_ascending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_round_trips_values() {
        let trace = vec![
            TraceEntry { generation: 1, evaluations: 50, best_value: 1.0 / 3.0 },
            TraceEntry { generation: 2, evaluations: 100, best_value: 1e-17 },
        ];
        let csv = trace_csv(&trace);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "generation,evaluations,best_value");
        for (line, row) in lines.zip(&trace) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0].parse::<usize>().unwrap(), row.generation);
            assert_eq!(fields[1].parse::<usize>().unwrap(), row.evaluations);
            assert_eq!(
                fields[2].parse::<f64>().unwrap().to_bits(),
                row.best_value.to_bits()
            );
        }
    }

    #[test]
    fn ranking_is_stable_under_ties() {
        let values = [3.0, 1.0, 3.0, 0.5];
        assert_eq!(rank_ascending(&values), vec![3, 1, 0, 2]);
    }

    #[test]
    fn batch_evaluation_reports_the_offending_index() {
        let f = |z: &[f64]| if z[0] > 1.5 { f64::NAN } else { z[0] };
        let points = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let err = evaluate_batch(&f, &points, 7).unwrap_err();
        match err {
            Error::NonFiniteObjective { index } => assert_eq!(index, 9),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn squash_respects_the_bound() {
        let u = vec![-50.0, -0.3, 0.0, 0.3, 50.0];
        let z = squash(&u, Some(2.0));
        assert!(z.iter().all(|v| v.abs() <= 2.0));
        assert_eq!(z[2], 0.0);
        assert!((z[3] - 2.0 * 0.3f64.tanh()).abs() < 1e-15);
        let id = squash(&u, None);
        assert_eq!(id, u);
    }
}
