//! Overhead reports and their comparison.

use serde::{Deserialize, Serialize};

use crate::bench::ScenarioReport;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub system: String,
    pub policy: String,
    pub buffer_size: usize,
    pub scenarios: Vec<ScenarioReport>,
}

impl OverheadReport {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Report(e.to_string()))
    }
}

/// Relative overhead reduction from `a` to `b`.
pub fn reduction(overhead_a: f64, overhead_b: f64) -> f64 {
    if overhead_a == overhead_b {
        0.0
    } else {
        (overhead_a - overhead_b) / overhead_a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComparison {
    pub scenario: String,
    pub overhead_a: f64,
    pub overhead_b: f64,
    pub reduction: f64,
    /// `t_exe` of `a` minus `t_exe` of `b`.
    pub t_exe_delta_mu: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub policy_a: String,
    pub policy_b: String,
    pub buffer_a: usize,
    pub buffer_b: usize,
    pub scenarios: Vec<ScenarioComparison>,
}

/// Compares two reports over the same scenarios and scan shapes.
pub fn compare_report(a: &OverheadReport, b: &OverheadReport) -> Result<Comparison, CliError> {
    if a.scenarios.len() != b.scenarios.len() {
        return Err(CliError::ShapeMismatch(format!(
            "{} scenarios vs {}",
            a.scenarios.len(),
            b.scenarios.len()
        )));
    }
    let mut scenarios = Vec::new();
    for (x, y) in a.scenarios.iter().zip(&b.scenarios) {
        if x.scenario != y.scenario
            || x.points != y.points
            || x.samples_per_point != y.samples_per_point
            || x.t_min_mu != y.t_min_mu
        {
            return Err(CliError::ShapeMismatch(format!(
                "{:?} {}x{} vs {:?} {}x{}",
                x.scenario, x.points, x.samples_per_point, y.scenario, y.points, y.samples_per_point
            )));
        }
        scenarios.push(ScenarioComparison {
            scenario: x.scenario.label().to_string(),
            overhead_a: x.overhead,
            overhead_b: y.overhead,
            reduction: reduction(x.overhead, y.overhead),
            t_exe_delta_mu: x.t_exe_mu - y.t_exe_mu,
        });
    }
    Ok(Comparison {
        policy_a: a.policy.clone(),
        policy_b: b.policy.clone(),
        buffer_a: a.buffer_size,
        buffer_b: b.buffer_size,
        scenarios,
    })
}
