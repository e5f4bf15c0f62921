//! Optimizer engines on the scaled box `[0, 1]ⁿ`: the evolutionary centers
//! algorithm, NSGA-II, a projected trust-region Gauss-Newton refiner, and
//! Sobol multi-start.

mod eca;
mod multistart;
mod nsga2;
mod refine;

use std::time::Duration;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::Result;
use crate::estimation::FAILURE_OBJECTIVE;

pub use eca::{eca_run, weighted_center, Eca, EcaConfig};
pub use multistart::{multistart_run, sobol_sample, MultistartConfig, MultistartResult, SOBOL_MAX_DIM};
pub use nsga2::{crowding_distance, non_dominated_sort, nsga2_run, Nsga2, Nsga2Config};
pub use refine::{trust_region_gn, RefineResult, RefineStatus, RefinerConfig};

/// Objective vector on the scaled box; single-objective problems return one
/// entry. Failed evaluations report [`FAILURE_OBJECTIVE`].
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn n_objectives(&self) -> usize {
        1
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64>;
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_objectives(&self) -> usize {
        (**self).n_objectives()
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        (**self).evaluate(x)
    }
}

type VectorFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a>;

/// Closure-backed [`Objective`].
pub struct FnObjective<'a> {
    dim: usize,
    n_objectives: usize,
    f: VectorFn<'a>,
}

impl<'a> FnObjective<'a> {
    pub fn scalar(dim: usize, f: impl Fn(&[f64]) -> f64 + Sync + 'a) -> Self {
        Self {
            dim,
            n_objectives: 1,
            f: Box::new(move |x| vec![f(x)]),
        }
    }

    pub fn vector(dim: usize, n_objectives: usize, f: impl Fn(&[f64]) -> Vec<f64> + Sync + 'a) -> Self {
        Self {
            dim,
            n_objectives,
            f: Box::new(f),
        }
    }
}

impl Objective for FnObjective<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_objectives(&self) -> usize {
        self.n_objectives
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

/// Residual problem for the Gauss-Newton refiner.
pub trait LeastSquares: Sync {
    fn dim(&self) -> usize;
    fn residuals(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn residuals_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

impl<T: LeastSquares + ?Sized> LeastSquares for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).residuals(x)
    }
    fn residuals_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        (**self).residuals_and_jacobian(x)
    }
}

type ResidualFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a>;
type JacobianFn<'a> = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Sync + 'a>;

/// Closure-backed [`LeastSquares`].
pub struct FnLeastSquares<'a> {
    dim: usize,
    r: ResidualFn<'a>,
    j: JacobianFn<'a>,
}

impl<'a> FnLeastSquares<'a> {
    pub fn new(
        dim: usize,
        r: impl Fn(&[f64]) -> Vec<f64> + Sync + 'a,
        j: impl Fn(&[f64]) -> DMatrix<f64> + Sync + 'a,
    ) -> Self {
        Self {
            dim,
            r: Box::new(r),
            j: Box::new(j),
        }
    }
}

impl LeastSquares for FnLeastSquares<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.r)(x))
    }
    fn residuals_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok(((self.r)(x), (self.j)(x)))
    }
}

/// `½‖r‖²`, or the failure sentinel.
pub fn half_squared_norm(r: &Result<Vec<f64>>) -> f64 {
    match r {
        Ok(r) => sanitize(0.5 * r.iter().map(|v| v * v).sum::<f64>()),
        Err(_) => FAILURE_OBJECTIVE,
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v.min(FAILURE_OBJECTIVE)
    } else {
        FAILURE_OBJECTIVE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub position: Vec<f64>,
    pub objectives: Vec<f64>,
    pub feasible: bool,
}

impl Individual {
    /// Wraps an evaluation, mapping non-finite values to the sentinel.
    pub fn new(position: Vec<f64>, objectives: Vec<f64>) -> Self {
        let objectives: Vec<f64> = objectives.into_iter().map(sanitize).collect();
        let feasible = objectives.iter().all(|&v| v < FAILURE_OBJECTIVE);
        Self {
            position,
            objectives,
            feasible,
        }
    }

    /// Scalar value: the objective, or the sum of objectives.
    pub fn value(&self) -> f64 {
        if self.feasible {
            self.objectives.iter().sum()
        } else {
            FAILURE_OBJECTIVE
        }
    }
}

/// Index of the best individual (lowest value, first on ties).
pub fn best_index(individuals: &[Individual]) -> Option<usize> {
    individuals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value().total_cmp(&b.1.value()).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct Population {
    pub individuals: Vec<Individual>,
    pub generation: u64,
    pub rng: ChaCha8Rng,
}

impl Population {
    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    /// Uniformly random initial population, evaluated and charged.
    pub fn random(
        objective: &dyn Objective,
        n_pop: usize,
        seed: u64,
        budget: &mut EvaluationBudget,
        threads: usize,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<Vec<f64>> = (0..n_pop)
            .map(|_| (0..objective.dim()).map(|_| rng.random::<f64>()).collect())
            .collect();
        let individuals = evaluate_batch(objective, positions, threads, budget);
        Self {
            individuals,
            generation: 0,
            rng,
        }
    }

    /// Order-sensitive FNV-1a hash of positions and objectives.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for ind in &self.individuals {
            for v in ind.position.iter().chain(&ind.objectives) {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Search-evaluation allotment and wall-time limit. Refinement evaluations
/// are tallied separately and never consume the search allotment.
#[derive(Debug, Clone)]
pub struct EvaluationBudget {
    pub max_evaluations: u64,
    pub max_wall: Option<Duration>,
    search: u64,
    refinement: u64,
    started: Instant,
}

impl EvaluationBudget {
    pub fn new(max_evaluations: u64) -> Self {
        Self {
            max_evaluations,
            max_wall: None,
            search: 0,
            refinement: 0,
            started: Instant::now(),
        }
    }

    pub fn with_wall_time(mut self, limit: Duration) -> Self {
        self.max_wall = Some(limit);
        self
    }

    pub fn charge_search(&mut self, n: u64) {
        self.search += n;
    }

    pub fn charge_refinement(&mut self, n: u64) {
        self.refinement += n;
    }

    pub fn search_evaluations(&self) -> u64 {
        self.search
    }

    pub fn refinement_evaluations(&self) -> u64 {
        self.refinement
    }

    pub fn total_evaluations(&self) -> u64 {
        self.search + self.refinement
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn exhausted(&self) -> bool {
        self.search >= self.max_evaluations
            || self.max_wall.is_some_and(|w| self.started.elapsed() >= w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub evaluations: u64,
    pub best: f64,
}

/// Best-so-far history; non-increasing by construction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub points: Vec<TracePoint>,
}

impl Trace {
    pub fn record(&mut self, evaluations: u64, value: f64) {
        let best = self.points.last().map_or(value, |p| p.best.min(value));
        self.points.push(TracePoint { evaluations, best });
    }

    pub fn best(&self) -> Option<f64> {
        self.points.last().map(|p| p.best)
    }
}

/// Default worker count for population evaluation.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Evaluates `positions` concurrently, preserving order; charges the search
/// budget once per point.
pub fn evaluate_batch(
    objective: &dyn Objective,
    positions: Vec<Vec<f64>>,
    threads: usize,
    budget: &mut EvaluationBudget,
) -> Vec<Individual> {
    budget.charge_search(positions.len() as u64);
    let threads = threads.clamp(1, positions.len().max(1));
    let values: Vec<Vec<f64>> = if threads == 1 {
        positions.iter().map(|x| objective.evaluate(x)).collect()
    } else {
        let chunk = positions.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = positions
                .chunks(chunk)
                .map(|c| scope.spawn(move || c.iter().map(|x| objective.evaluate(x)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("objective evaluation panicked"))
                .collect()
        })
    };
    positions
        .into_iter()
        .zip(values)
        .map(|(p, v)| Individual::new(p, v))
        .collect()
}

/// Search result shared by the metaheuristics.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Individual,
    pub population: Population,
    pub trace: Trace,
    pub evaluations: u64,
}

/// Generation-wise population search, driven externally by the hybrid loop.
pub trait Metaheuristic {
    fn step(&mut self, objective: &dyn Objective, budget: &mut EvaluationBudget);
    fn population(&self) -> &Population;
    fn population_mut(&mut self) -> &mut Population;
    /// Best individual ever evaluated.
    fn best(&self) -> &Individual;
    /// Offers an externally evaluated point to the best-so-far record.
    fn observe(&mut self, individual: &Individual);
    fn is_multi_objective(&self) -> bool;
}

fn clamp_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn individual_sanitizes() {
        let a = Individual::new(vec![0.5], vec![f64::NAN]);
        assert!(!a.feasible);
        assert_eq!(a.value(), FAILURE_OBJECTIVE);
        let b = Individual::new(vec![0.5], vec![1.0, 2.0]);
        assert_eq!(b.value(), 3.0);
    }

    #[test]
    fn trace_is_monotone() {
        let mut t = Trace::default();
        t.record(1, 3.0);
        t.record(2, 5.0);
        t.record(3, 1.0);
        let bests: Vec<f64> = t.points.iter().map(|p| p.best).collect();
        assert_eq!(bests, vec![3.0, 3.0, 1.0]);
    }

    #[test]
    fn batch_order_is_thread_independent() {
        let obj = FnObjective::scalar(2, |x| x[0] * 10.0 + x[1]);
        let pts: Vec<Vec<f64>> = (0..17).map(|k| vec![k as f64 / 17.0, 0.5]).collect();
        let mut b1 = EvaluationBudget::new(100);
        let mut b4 = EvaluationBudget::new(100);
        let one = evaluate_batch(&obj, pts.clone(), 1, &mut b1);
        let four = evaluate_batch(&obj, pts, 4, &mut b4);
        assert_eq!(one, four);
        assert_eq!(b1.search_evaluations(), 17);
    }

    #[test]
    fn budget_limits() {
        let mut b = EvaluationBudget::new(10);
        assert!(!b.exhausted());
        b.charge_refinement(50);
        assert!(!b.exhausted());
        b.charge_search(10);
        assert!(b.exhausted());
        assert_eq!(b.total_evaluations(), 60);
        let w = EvaluationBudget::new(10).with_wall_time(Duration::ZERO);
        assert!(w.exhausted());
    }
}
