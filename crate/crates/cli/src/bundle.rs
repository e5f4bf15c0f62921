//! Calibration results. The bundle is a pure function of (config, seed);
//! wall-clock data lives in the metadata sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub physical: f64,
    pub scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedObjective {
    pub name: String,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub evaluations: u64,
    pub best_objective: f64,
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    /// Outer iteration for hybrid runs.
    pub outer: Option<usize>,
    pub start: Vec<f64>,
    pub refined: Vec<f64>,
    pub objective: f64,
    /// Normalized distance from start to refined point.
    pub radius: f64,
    pub iterations: usize,
    pub evaluations: u64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatistics {
    pub search_evaluations: u64,
    pub refinement_evaluations: u64,
    pub total_evaluations: u64,
    pub refinements: usize,
    pub outer_iterations: usize,
    pub rtol: f64,
    pub atol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub method: String,
    pub seed: u64,
    pub objective: f64,
    pub parameters: Vec<ParameterEstimate>,
    pub by_experiment: Vec<NamedObjective>,
    pub by_measurement: Vec<NamedObjective>,
    pub trace: Vec<TraceRow>,
    pub refinements: Vec<RefinementRecord>,
    pub statistics: RunStatistics,
}

/// Run facts that vary between otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub wall_s: f64,
    /// `(evaluations, wall_s)` at each recorded hybrid phase row.
    pub trace_wall_s: Vec<(u64, f64)>,
}

impl ResultBundle {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundle serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read bundle {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn physical(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.physical).collect()
    }

    pub fn scaled(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.scaled).collect()
    }
}

/// Keeps rows where the evaluation count strictly increases; within a run of
/// equal counts the last row (lowest best) wins.
pub fn strictly_increasing(rows: Vec<TraceRow>) -> Vec<TraceRow> {
    let mut out: Vec<TraceRow> = Vec::with_capacity(rows.len());
    for row in rows {
        match out.last_mut() {
            Some(last) if last.evaluations == row.evaluations => *last = row,
            Some(last) if last.evaluations > row.evaluations => {}
            _ => out.push(row),
        }
    }
    out
}

/// Drops rows that neither improve the best value nor change phase, keeping
/// the final row.
pub fn thin(rows: Vec<TraceRow>) -> Vec<TraceRow> {
    let n = rows.len();
    let mut out: Vec<TraceRow> = Vec::new();
    for (k, row) in rows.into_iter().enumerate() {
        let keep = match out.last() {
            None => true,
            Some(last) => row.best_objective < last.best_objective || row.phase != last.phase || k + 1 == n,
        };
        if keep {
            out.push(row);
        }
    }
    out
}
