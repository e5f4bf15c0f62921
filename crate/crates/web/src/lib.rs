//! Browser demo: chromatogram simulation, the hybrid distance filters on a
//! two-dimensional test problem, and the critical-distance schedule.

use std::f64::consts::PI;

use adrfit::chroma::{chromatography_semidiscrete, ColumnConfig, Discretization, ProcessProgram, SmaParameters, UvModel};
use adrfit::estimation::{simulate_outlet, SolverSettings};
use adrfit::hybrid::{beta_after, decay_for, run_hybrid, HybridConfig, MetaheuristicConfig, RefinementStrategy};
use adrfit::optimizers::{EcaConfig, EvaluationBudget, FnLeastSquares, FnObjective};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Outlet of a 0→50 % B gradient run, flattened as `[t, uv, A1, A2, M]`
/// per sample. `k_eq` and `charge` are per protein; the rest is ground truth.
pub fn chromatogram(k_eq: &[f64], charge: &[f64], elute_cv: f64, points: usize) -> adrfit::Result<Vec<f64>> {
    if k_eq.len() != 3 || charge.len() != 3 || points < 2 {
        return Err(adrfit::Error::InvalidInput("need three k_eq, three charges and at least two points".into()));
    }
    let mut p = SmaParameters::ground_truth();
    p.k_eq.copy_from_slice(k_eq);
    p.charge.copy_from_slice(charge);
    p.validate()?;
    let column = ColumnConfig::default();
    let program = ProcessProgram::gradient(0.52, 2.0, elute_cv, 0.0, 50.0);
    let sd = chromatography_semidiscrete(&column, &program, Discretization::default())?;
    let t_end = program.duration_s(&column);
    let grid: Vec<f64> = (0..points).map(|k| (t_end * k as f64 / (points - 1) as f64).min(t_end)).collect();
    let settings = SolverSettings {
        rtol: 1e-5,
        atol: 1e-11,
        ..SolverSettings::default()
    };
    let prof = simulate_outlet(&sd, &p.to_vec(), &grid, t_end, &settings)?;
    let uv = UvModel::default();
    Ok(prof
        .times
        .iter()
        .zip(&prof.outlet)
        .flat_map(|(t, c)| [*t, uv.observe(&c[1..4]), c[1], c[2], c[3]])
        .collect())
}

fn bumpy_residuals(x: &[f64]) -> Vec<f64> {
    x.iter().flat_map(|&v| [v - 0.3, 0.3 * (6.0 * PI * v).sin()]).collect()
}

/// Objective of the two-dimensional test problem on an `n × n` grid over
/// the unit square, row-major in `y`.
pub fn bumpy_grid(n: usize) -> Vec<f64> {
    let at = |k: usize| (k as f64 + 0.5) / n as f64;
    (0..n * n)
        .map(|i| 0.5 * bumpy_residuals(&[at(i % n), at(i / n)]).iter().map(|r| r * r).sum::<f64>())
        .collect()
}

#[derive(Serialize)]
pub struct DemoRecord {
    pub outer: usize,
    pub start: Vec<f64>,
    pub refined: Vec<f64>,
    pub radius: f64,
    pub objective: f64,
}

#[derive(Serialize)]
pub struct FilterDemo {
    pub records: Vec<DemoRecord>,
    pub population: Vec<Vec<f64>>,
    /// `β` before each outer iteration.
    pub beta: Vec<f64>,
    pub best: Vec<f64>,
    pub best_objective: f64,
    pub evaluations: u64,
}

/// Hybrid ECA run on the two-dimensional test problem.
pub fn filter_demo(seed: u64, n_outer: usize, n_cand: usize, critical_distance: f64, active: bool) -> adrfit::Result<FilterDemo> {
    let objective = FnObjective::scalar(2, |x| 0.5 * bumpy_residuals(x).iter().map(|r| r * r).sum::<f64>());
    let jac = |x: &[f64]| {
        let mut m = DMatrix::zeros(4, 2);
        for (i, &v) in x.iter().enumerate() {
            m[(2 * i, i)] = 1.0;
            m[(2 * i + 1, i)] = 1.8 * PI * (6.0 * PI * v).cos();
        }
        m
    };
    let problem = FnLeastSquares::new(2, bumpy_residuals, jac);
    let strategy = if active { RefinementStrategy::Active } else { RefinementStrategy::Passive };
    let budget_n = 60 * n_outer as u64;
    let eca = EcaConfig { threads: 1, ..EcaConfig::new(12) };
    let mut cfg = HybridConfig::new(MetaheuristicConfig::Eca(eca), strategy, n_outer, n_cand, budget_n);
    cfg.critical_distance = critical_distance;
    cfg.rho = decay_for(n_outer, critical_distance, 1e-12);
    let mut budget = EvaluationBudget::new(budget_n);
    let res = run_hybrid(&cfg, &objective, &problem, seed, &mut budget)?;
    Ok(FilterDemo {
        records: res
            .records
            .iter()
            .map(|r| DemoRecord {
                outer: r.outer,
                start: r.start.clone(),
                refined: r.refined.clone(),
                radius: r.radius,
                objective: r.objective,
            })
            .collect(),
        population: res.population.individuals.iter().map(|i| i.position.clone()).collect(),
        beta: (0..n_outer).map(|k| beta_after(cfg.beta0, cfg.rho, k)).collect(),
        best: res.best.position.clone(),
        best_objective: res.best.value(),
        evaluations: res.evaluations,
    })
}

/// `β_k·Δ` for `k = 0..=n_outer` with the decay that reaches `min_distance`.
pub fn distance_schedule(n_outer: usize, critical_distance: f64, min_distance: f64) -> Vec<f64> {
    let rho = decay_for(n_outer, critical_distance, min_distance);
    (0..=n_outer).map(|k| beta_after(1.0, rho, k) * critical_distance).collect()
}

fn js(e: adrfit::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = simulateChromatogram)]
pub fn simulate_chromatogram(k_eq: &[f64], charge: &[f64], elute_cv: f64, points: usize) -> Result<Vec<f64>, JsError> {
    chromatogram(k_eq, charge, elute_cv, points).map_err(js)
}

#[wasm_bindgen(js_name = objectiveGrid)]
pub fn objective_grid(n: usize) -> Vec<f64> {
    bumpy_grid(n)
}

/// JSON-encoded [`FilterDemo`].
#[wasm_bindgen(js_name = runFilterDemo)]
pub fn run_filter_demo(seed: u64, n_outer: usize, n_cand: usize, critical_distance: f64, active: bool) -> Result<String, JsError> {
    let demo = filter_demo(seed, n_outer, n_cand, critical_distance, active).map_err(js)?;
    serde_json::to_string(&demo).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = distanceSchedule)]
pub fn distance_schedule_js(n_outer: usize, critical_distance: f64, min_distance: f64) -> Vec<f64> {
    distance_schedule(n_outer, critical_distance, min_distance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chromatogram_has_peaks() {
        let out = chromatogram(&[0.03, 0.0275, 0.0188], &[3.0, 4.0, 5.0], 10.0, 400).unwrap();
        assert_eq!(out.len(), 5 * 400);
        let uv_max = out.chunks(5).map(|r| r[1]).fold(0.0f64, f64::max);
        assert!(uv_max > 1e-6);
        assert!(chromatogram(&[0.03], &[3.0], 10.0, 200).is_err());
    }

    #[test]
    fn filter_demo_finds_the_global_minimum() {
        let demo = filter_demo(1, 4, 2, 0.1, false).unwrap();
        assert!(!demo.records.is_empty());
        assert_eq!(demo.beta.len(), 4);
        let grid_min = bumpy_grid(400).into_iter().fold(f64::INFINITY, f64::min);
        assert!(demo.best_objective <= grid_min, "{} vs {grid_min}", demo.best_objective);
        assert!(serde_json::to_string(&demo).is_ok());
    }

    #[test]
    fn schedule_ends_at_minimum_distance() {
        let s = distance_schedule(5, 0.1, 1e-12);
        assert_eq!(s.len(), 6);
        assert_eq!(s[0], 0.1);
        assert!((s[5] - 1e-12).abs() <= 1e-15 * 1e-12);
        assert_eq!(bumpy_grid(4).len(), 16);
    }
}
