//! Four-phase hybrid search: a population metaheuristic proposes candidates,
//! distance filters select promising and novel ones, a local solver refines
//! them, and refinements are either bookkept (passive) or fed back into the
//! population (active).

use web_time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::{
    best_index, trust_region_gn, Eca, EcaConfig, EvaluationBudget, Individual, LeastSquares,
    Metaheuristic, Nsga2, Nsga2Config, Objective, Population, RefinerConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementStrategy {
    Passive,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaheuristicConfig {
    Eca(EcaConfig),
    Nsga2(Nsga2Config),
}

impl MetaheuristicConfig {
    pub fn n_pop(&self) -> usize {
        match self {
            MetaheuristicConfig::Eca(c) => c.n_pop,
            MetaheuristicConfig::Nsga2(c) => c.n_pop,
        }
    }

    pub fn is_multi_objective(&self) -> bool {
        matches!(self, MetaheuristicConfig::Nsga2(_))
    }

    fn build(
        &self,
        objective: &dyn Objective,
        seed: u64,
        budget: &mut EvaluationBudget,
    ) -> Result<Box<dyn Metaheuristic>> {
        Ok(match *self {
            MetaheuristicConfig::Eca(c) => Box::new(Eca::new(objective, c, seed, budget)?),
            MetaheuristicConfig::Nsga2(c) => Box::new(Nsga2::new(objective, c, seed, budget)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridConfig {
    pub n_outer: usize,
    /// Metaheuristic generations per outer iteration.
    pub n_inner: usize,
    /// Candidates refined per outer iteration; zero gives a pure metaheuristic run.
    pub n_cand: usize,
    /// Critical distance Δ in normalized scaled units.
    pub critical_distance: f64,
    pub beta0: f64,
    pub rho: f64,
    pub strategy: RefinementStrategy,
    pub refiner: RefinerConfig,
    pub metaheuristic: MetaheuristicConfig,
    /// Upper bound on refinements over the whole run.
    pub max_refinements: Option<usize>,
}

impl HybridConfig {
    /// Standard settings: Δ = 0.1, β₀ = 1 and ρ chosen so that βΔ reaches
    /// 10⁻¹² after the last outer iteration; `n_inner` splits the search
    /// budget evenly over the outer iterations.
    pub fn new(
        metaheuristic: MetaheuristicConfig,
        strategy: RefinementStrategy,
        n_outer: usize,
        n_cand: usize,
        search_budget: u64,
    ) -> Self {
        let critical_distance = 0.1;
        Self {
            n_outer,
            n_inner: inner_iterations(search_budget, n_outer, metaheuristic.n_pop()),
            n_cand,
            critical_distance,
            beta0: 1.0,
            rho: decay_for(n_outer, critical_distance, 1e-12),
            strategy,
            refiner: RefinerConfig::default(),
            metaheuristic,
            max_refinements: Some(n_outer * n_cand),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 {
            return Err(Error::Config("n_outer must be at least 1".into()));
        }
        if !(self.critical_distance > 0.0) || !(self.beta0 > 0.0) {
            return Err(Error::Config("critical distance and β₀ must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("ρ must lie in (0, 1], got {}", self.rho)));
        }
        if self.strategy == RefinementStrategy::Active && self.metaheuristic.is_multi_objective() {
            return Err(Error::Config(
                "active refinement is not supported for multi-objective metaheuristics".into(),
            ));
        }
        self.refiner.validate()
    }
}

/// `floor((budget / n_outer) / n_pop)`.
pub fn inner_iterations(search_budget: u64, n_outer: usize, n_pop: usize) -> usize {
    if n_outer == 0 || n_pop == 0 {
        return 0;
    }
    ((search_budget / n_outer as u64) / n_pop as u64) as usize
}

/// Decay factor that takes `βΔ` from Δ down to `min_distance` in `n_outer`
/// updates (with β₀ = 1).
pub fn decay_for(n_outer: usize, critical_distance: f64, min_distance: f64) -> f64 {
    10f64.powf((min_distance / critical_distance).log10() / n_outer.max(1) as f64)
}

/// `β₀ ρᵏ`, evaluated in log form so the rounding error does not grow with k.
pub fn beta_after(beta0: f64, rho: f64, k: usize) -> f64 {
    if k == 0 {
        return beta0;
    }
    beta0 * 10f64.powf(k as f64 * rho.log10())
}

/// `sqrt((1/n) Σ (aᵢ − bᵢ)²)`.
pub fn normalized_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "distance needs equal nonzero dimensions, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    normalized_distance(a, b).unwrap_or(0.0)
}

/// A refinement and the data the filters need about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// Accepted starting point p̃ (scaled).
    pub start: Vec<f64>,
    /// Refined point p* (scaled).
    pub refined: Vec<f64>,
    pub objective: f64,
    /// Estimated basin radius Δ(p*) = ‖p̃ − p*‖.
    pub radius: f64,
    pub outer: usize,
    pub failed: bool,
    pub iterations: usize,
    pub evaluations: u64,
    /// Position of p̃ in the accepted archive.
    pub accepted_index: usize,
    /// Number of records that existed when p̃ was selected.
    pub records_before: usize,
}

/// Passes iff p is at least βΔ away from every accepted point.
pub fn diversity_filter(candidate: &[f64], accepted: &[Vec<f64>], beta: f64, critical_distance: f64) -> bool {
    accepted.iter().all(|a| distance(candidate, a) >= beta * critical_distance)
}

/// Passes iff p lies outside β times every estimated basin radius.
pub fn proximity_filter(candidate: &[f64], records: &[CandidateRecord], beta: f64) -> bool {
    records.iter().all(|r| distance(candidate, &r.refined) >= beta * r.radius)
}

/// Filter archives and distance factor; archives are append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub beta0: f64,
    pub rho: f64,
    pub completed: usize,
    pub critical_distance: f64,
    pub accepted: Vec<Vec<f64>>,
    pub records: Vec<CandidateRecord>,
}

impl FilterState {
    pub fn new(beta0: f64, rho: f64, critical_distance: f64) -> Self {
        Self {
            beta0,
            rho,
            completed: 0,
            critical_distance,
            accepted: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn beta(&self) -> f64 {
        beta_after(self.beta0, self.rho, self.completed)
    }

    /// β ← ρβ after an outer iteration.
    pub fn update_beta(&mut self) -> f64 {
        self.completed += 1;
        self.beta()
    }
}

/// Walks the population from best to worst (objective sum for MO) and
/// accepts up to `n_cand` feasible points that pass both filters. Accepted
/// points enter the archive immediately; returns their archive indices.
pub fn select_candidates(individuals: &[Individual], n_cand: usize, state: &mut FilterState) -> Vec<usize> {
    let mut order: Vec<usize> = (0..individuals.len()).filter(|&i| individuals[i].feasible).collect();
    order.sort_by(|&a, &b| individuals[a].value().total_cmp(&individuals[b].value()).then(a.cmp(&b)));
    let beta = state.beta();
    let mut selected = Vec::new();
    for i in order {
        if selected.len() >= n_cand {
            break;
        }
        let p = &individuals[i].position;
        if diversity_filter(p, &state.accepted, beta, state.critical_distance)
            && proximity_filter(p, &state.records, beta)
        {
            state.accepted.push(p.clone());
            selected.push(state.accepted.len() - 1);
        }
    }
    selected
}

/// Refines the accepted point `start` on the unit box. A failed refinement
/// keeps p* = p̃ with zero radius so it never blocks later candidates.
pub fn refine_candidate(
    start: &[f64],
    problem: &dyn LeastSquares,
    refiner: &RefinerConfig,
    outer: usize,
) -> CandidateRecord {
    let n = start.len();
    let (lower, upper) = (vec![0.0; n], vec![1.0; n]);
    let base = CandidateRecord {
        start: start.to_vec(),
        refined: start.to_vec(),
        objective: crate::estimation::FAILURE_OBJECTIVE,
        radius: 0.0,
        outer,
        failed: true,
        iterations: 0,
        evaluations: 0,
        accepted_index: 0,
        records_before: 0,
    };
    match trust_region_gn(start, problem, &lower, &upper, refiner) {
        Ok(res) if !res.status.is_failure() => CandidateRecord {
            radius: distance(start, &res.x),
            objective: res.objective,
            failed: false,
            iterations: res.iterations,
            evaluations: res.evaluations(),
            refined: res.x,
            ..base
        },
        Ok(res) => CandidateRecord {
            iterations: res.iterations,
            evaluations: res.evaluations(),
            ..base
        },
        Err(_) => base,
    }
}

/// Phase 4. Passive leaves the population untouched; active replaces the best
/// individual that is worse than φ(p*). Returns the replaced index.
pub fn replace(
    population: &mut Population,
    record: &CandidateRecord,
    strategy: RefinementStrategy,
    multi_objective: bool,
) -> Result<Option<usize>> {
    match strategy {
        RefinementStrategy::Passive => Ok(None),
        RefinementStrategy::Active if multi_objective => Err(Error::Config(
            "active refinement is not supported for multi-objective metaheuristics".into(),
        )),
        RefinementStrategy::Active => {
            if record.failed {
                return Ok(None);
            }
            let target = population
                .individuals
                .iter()
                .enumerate()
                .filter(|(_, ind)| ind.value() > record.objective)
                .min_by(|a, b| a.1.value().total_cmp(&b.1.value()).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i);
            if let Some(i) = target {
                population.individuals[i] = Individual::new(record.refined.clone(), vec![record.objective]);
            }
            Ok(target)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Search,
    Selection,
    Refinement,
    Replacement,
}

/// Trace row, written after every search generation and phase transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridTraceRow {
    pub outer: usize,
    pub phase: Phase,
    pub search_evaluations: u64,
    /// Search plus refinement evaluations.
    pub evaluations: u64,
    pub best: f64,
    pub beta: f64,
    pub fingerprint: u64,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct HybridResult {
    pub best: Individual,
    /// Index into `records` when the best point came from a refinement.
    pub best_record: Option<usize>,
    pub records: Vec<CandidateRecord>,
    pub accepted: Vec<Vec<f64>>,
    pub trace: Vec<HybridTraceRow>,
    pub population: Population,
    pub outer_completed: usize,
    pub beta: f64,
    pub search_evaluations: u64,
    pub evaluations: u64,
}

/// Runs the hybrid loop. `objective` drives the metaheuristic (vector-valued
/// for NSGA-II) and `problem` the refinements.
pub fn run_hybrid(
    config: &HybridConfig,
    objective: &dyn Objective,
    problem: &dyn LeastSquares,
    seed: u64,
    budget: &mut EvaluationBudget,
) -> Result<HybridResult> {
    config.validate()?;
    if objective.dim() != problem.dim() {
        return Err(Error::invalid("objective and residual problem dimensions differ"));
    }
    let started = Instant::now();
    let mut meta = config.metaheuristic.build(objective, seed, budget)?;
    let mut state = FilterState::new(config.beta0, config.rho, config.critical_distance);
    let mut best = meta.best().clone();
    let mut best_record = None;
    let mut trace = Vec::new();
    let row = |trace: &mut Vec<HybridTraceRow>, outer, phase, best: f64, beta, pop: &Population, b: &EvaluationBudget| {
        trace.push(HybridTraceRow {
            outer,
            phase,
            search_evaluations: b.search_evaluations(),
            evaluations: b.total_evaluations(),
            best,
            beta,
            fingerprint: pop.fingerprint(),
            wall_s: started.elapsed().as_secs_f64(),
        });
    };
    row(&mut trace, 0, Phase::Init, best.value(), state.beta(), meta.population(), budget);
    let max_refinements = config.max_refinements.unwrap_or(usize::MAX);
    let mut outer_completed = 0;
    for outer in 0..config.n_outer {
        // Phase 1: search.
        for _ in 0..config.n_inner {
            if budget.exhausted() {
                break;
            }
            meta.step(objective, budget);
            if meta.best().value() < best.value() {
                best = meta.best().clone();
                best_record = None;
            }
            row(&mut trace, outer, Phase::Search, best.value(), state.beta(), meta.population(), budget);
        }
        if wall_exhausted(budget) {
            break;
        }

        // Phase 2: selection.
        let room = max_refinements.saturating_sub(state.records.len()).min(config.n_cand);
        let records_before = state.records.len();
        let selected = select_candidates(&meta.population().individuals, room, &mut state);
        row(&mut trace, outer, Phase::Selection, best.value(), state.beta(), meta.population(), budget);

        // Phase 3: refinement.
        let mut fresh = Vec::with_capacity(selected.len());
        for &a in &selected {
            if wall_exhausted(budget) {
                break;
            }
            let mut record = refine_candidate(&state.accepted[a], problem, &config.refiner, outer);
            record.accepted_index = a;
            record.records_before = records_before;
            budget.charge_refinement(record.evaluations);
            if !record.failed && record.objective < best.value() {
                best = Individual::new(record.refined.clone(), vec![record.objective]);
                best_record = Some(records_before + fresh.len());
            }
            fresh.push(record);
        }
        row(&mut trace, outer, Phase::Refinement, best.value(), state.beta(), meta.population(), budget);

        // Phase 4: replacement and β update.
        let multi = meta.is_multi_objective();
        for record in &fresh {
            replace(meta.population_mut(), record, config.strategy, multi)?;
            if !record.failed && !multi {
                meta.observe(&Individual::new(record.refined.clone(), vec![record.objective]));
            }
        }
        state.records.extend(fresh);
        state.update_beta();
        outer_completed = outer + 1;
        row(&mut trace, outer, Phase::Replacement, best.value(), state.beta(), meta.population(), budget);
        if budget.exhausted() {
            break;
        }
    }
    Ok(HybridResult {
        best,
        best_record,
        records: state.records,
        accepted: state.accepted,
        trace,
        population: meta.population().clone(),
        outer_completed,
        beta: beta_after(config.beta0, config.rho, outer_completed),
        search_evaluations: budget.search_evaluations(),
        evaluations: budget.total_evaluations(),
    })
}

fn wall_exhausted(budget: &EvaluationBudget) -> bool {
    budget.max_wall.is_some_and(|w| budget.elapsed() >= w)
}

/// Re-checks every record against the archives as they stood when its start
/// point was selected. Returns human-readable violations (empty when sound).
pub fn replay_filters(result: &HybridResult, config: &HybridConfig) -> Vec<String> {
    let mut violations = Vec::new();
    for (k, rec) in result.records.iter().enumerate() {
        let beta = beta_after(config.beta0, config.rho, rec.outer);
        match result.accepted.get(rec.accepted_index) {
            Some(p) if *p == rec.start => {}
            _ => violations.push(format!("record {k}: start point missing from the accepted archive")),
        }
        let earlier = &result.accepted[..rec.accepted_index.min(result.accepted.len())];
        if !diversity_filter(&rec.start, earlier, beta, config.critical_distance) {
            violations.push(format!("record {k}: diversity filter violated"));
        }
        let prior = &result.records[..rec.records_before.min(k)];
        if !proximity_filter(&rec.start, prior, beta) {
            violations.push(format!("record {k}: proximity filter violated"));
        }
        if rec.records_before > k {
            violations.push(format!("record {k}: refers to later records"));
        }
    }
    violations
}

/// True when the population fingerprint never changes across a replacement
/// phase; the passive-strategy invariant.
pub fn replacement_preserves_population(trace: &[HybridTraceRow]) -> bool {
    trace.windows(2).all(|w| {
        w[1].phase != Phase::Replacement || w[0].phase != Phase::Refinement || w[0].fingerprint == w[1].fingerprint
    })
}

/// Sum of objectives of the best individual in a population.
pub fn population_best(population: &Population) -> Option<f64> {
    best_index(&population.individuals).map(|i| population.individuals[i].value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::{default_threads, eca_run, FnLeastSquares, FnObjective};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(refined: Vec<f64>, radius: f64) -> CandidateRecord {
        CandidateRecord {
            start: refined.clone(),
            refined,
            objective: 0.0,
            radius,
            outer: 0,
            failed: false,
            iterations: 0,
            evaluations: 0,
            accepted_index: 0,
            records_before: 0,
        }
    }

    #[test]
    fn distance_examples() {
        let a = [0.7, 0.7, 0.7, 0.7];
        let b = [0.5, 0.5, 0.5, 0.5];
        assert!((normalized_distance(&a, &b).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(normalized_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(normalized_distance(&[0.75], &[0.25]).unwrap(), 0.5);
        assert!(normalized_distance(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn diversity_examples() {
        assert!(diversity_filter(&[0.5], &[], 1.0, 0.1));
        // Exactly βΔ passes: 0.5 · 0.5 = 0.25 = |0.75 − 0.5|.
        assert!(diversity_filter(&[0.75], &[vec![0.5]], 0.5, 0.5));
        assert!(!diversity_filter(&[0.55], &[vec![0.5]], 1.0, 0.1));
    }

    #[test]
    fn proximity_examples() {
        assert!(proximity_filter(&[0.5], &[], 1.0));
        assert!(proximity_filter(&[0.5], &[record(vec![0.5], 0.0)], 1.0));
        assert!(!proximity_filter(&[0.6], &[record(vec![0.5], 0.3)], 1.0));
        assert!(proximity_filter(&[0.9], &[record(vec![0.5], 0.3)], 1.0));
    }

    fn individuals(points: &[(f64, f64)]) -> Vec<Individual> {
        points.iter().map(|&(x, v)| Individual::new(vec![x], vec![v])).collect()
    }

    #[test]
    fn selection_examples() {
        let pop = individuals(&[(0.1, 3.0), (0.5, 1.0), (0.9, 2.0)]);
        let mut state = FilterState::new(1.0, 1.0, 0.1);
        let sel = select_candidates(&pop, 2, &mut state);
        assert_eq!(state.accepted, vec![vec![0.5], vec![0.9]]);
        assert_eq!(sel, vec![0, 1]);

        // Best inside a known basin: the second best is taken instead.
        let mut state = FilterState::new(1.0, 1.0, 0.1);
        state.records.push(record(vec![0.5], 0.2));
        select_candidates(&pop, 1, &mut state);
        assert_eq!(state.accepted, vec![vec![0.9]]);

        // Everything filtered.
        let mut state = FilterState::new(1.0, 1.0, 0.1);
        state.records.push(record(vec![0.5], 1.0));
        assert!(select_candidates(&pop, 2, &mut state).is_empty());
    }

    #[test]
    fn nearby_candidates_are_not_both_accepted() {
        let pop = individuals(&[(0.50, 1.0), (0.52, 1.1), (0.9, 2.0)]);
        let mut state = FilterState::new(1.0, 1.0, 0.1);
        select_candidates(&pop, 2, &mut state);
        assert_eq!(state.accepted, vec![vec![0.50], vec![0.9]]);
    }

    fn linear_problem() -> FnLeastSquares<'static> {
        // r = A x − b with minimizer (0.2, 0.6).
        FnLeastSquares::new(
            2,
            |x| vec![2.0 * x[0] - 0.4, x[1] - 0.6, x[0] + x[1] - 0.8],
            |_| DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
        )
    }

    #[test]
    fn refinement_records_basin_radius() {
        let pb = linear_problem();
        let rec = refine_candidate(&[0.9, 0.1], &pb, &RefinerConfig::default(), 3);
        assert!(!rec.failed);
        assert_eq!(rec.outer, 3);
        let expected = normalized_distance(&[0.9, 0.1], &[0.2, 0.6]).unwrap();
        assert!((rec.radius - expected).abs() < 1e-8, "{} vs {expected}", rec.radius);
        let at_min = refine_candidate(&[0.2, 0.6], &pb, &RefinerConfig::default(), 0);
        assert!(at_min.radius < 1e-12);
    }

    #[test]
    fn failed_refinement_has_zero_radius() {
        let pb = FnLeastSquares::new(1, |_| vec![f64::NAN], |_| DMatrix::zeros(1, 1));
        let rec = refine_candidate(&[0.4], &pb, &RefinerConfig::default(), 0);
        assert!(rec.failed);
        assert_eq!(rec.radius, 0.0);
        assert_eq!(rec.refined, vec![0.4]);
    }

    fn population(values: &[f64]) -> Population {
        Population {
            individuals: values.iter().enumerate().map(|(i, &v)| Individual::new(vec![i as f64 / 10.0], vec![v])).collect(),
            generation: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    #[test]
    fn replacement_examples() {
        let mut rec = record(vec![0.33], 0.1);
        rec.objective = 1.0;
        let mut pop = population(&[0.9, 1.1, 2.0]);
        let before = pop.fingerprint();
        assert_eq!(replace(&mut pop, &rec, RefinementStrategy::Passive, false).unwrap(), None);
        assert_eq!(pop.fingerprint(), before);
        assert_eq!(replace(&mut pop, &rec, RefinementStrategy::Active, false).unwrap(), Some(1));
        assert_eq!(pop.individuals[1].position, vec![0.33]);
        assert_eq!(pop.individuals[1].value(), 1.0);
        let mut better = population(&[0.1, 0.2]);
        assert_eq!(replace(&mut better, &rec, RefinementStrategy::Active, false).unwrap(), None);
        assert!(replace(&mut better, &rec, RefinementStrategy::Active, true).is_err());
    }

    #[test]
    fn beta_schedule() {
        let mut s = FilterState::new(1.0, 0.5, 0.1);
        assert_eq!(s.update_beta(), 0.5);
        let mut c = FilterState::new(1.0, 1.0, 0.1);
        c.update_beta();
        assert_eq!(c.beta(), 1.0);
        for n in 1..=30 {
            let rho = decay_for(n, 0.1, 1e-12);
            assert!((rho - 10f64.powf(-11.0 / n as f64)).abs() <= 1e-16);
            let mut st = FilterState::new(1.0, rho, 0.1);
            for _ in 0..n {
                st.update_beta();
            }
            let final_dist = st.beta() * 0.1;
            assert!((final_dist - 1e-12).abs() <= 1e-15 * 1e-12, "n={n}: {final_dist:e}");
        }
    }

    #[test]
    fn inner_iteration_formula() {
        assert_eq!(inner_iterations(40_000, 10, 200), 20);
        assert_eq!(inner_iterations(4_000, 3, 20), 66);
        assert_eq!(inner_iterations(10, 3, 20), 0);
    }

    fn sphere_objective() -> FnObjective<'static> {
        FnObjective::scalar(4, |x| 0.5 * x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum::<f64>())
    }

    fn sphere_ls() -> FnLeastSquares<'static> {
        FnLeastSquares::new(4, |x| x.iter().map(|v| v - 0.3).collect(), |_| DMatrix::identity(4, 4))
    }

    fn eca_config(strategy: RefinementStrategy, n_outer: usize, n_cand: usize, budget: u64) -> HybridConfig {
        let mut eca = EcaConfig::new(10);
        eca.threads = default_threads();
        HybridConfig::new(MetaheuristicConfig::Eca(eca), strategy, n_outer, n_cand, budget)
    }

    #[test]
    fn zero_candidates_is_pure_metaheuristic() {
        let cfg = eca_config(RefinementStrategy::Passive, 1, 0, 200);
        let mut b = EvaluationBudget::new(200);
        let res = run_hybrid(&cfg, &sphere_objective(), &sphere_ls(), 5, &mut b).unwrap();
        assert!(res.records.is_empty());
        let mut b2 = EvaluationBudget::new(200);
        let pure = eca_run(&sphere_objective(), &mut b2, 5, 10).unwrap();
        assert_eq!(res.population.fingerprint(), pure.population.fingerprint());
        assert_eq!(res.best.value(), pure.best.value());
    }

    #[test]
    fn convex_problem_reaches_refined_optimum() {
        for seed in 0..3 {
            for strategy in [RefinementStrategy::Passive, RefinementStrategy::Active] {
                let cfg = eca_config(strategy, 4, 2, 400);
                let mut b = EvaluationBudget::new(400);
                let res = run_hybrid(&cfg, &sphere_objective(), &sphere_ls(), seed, &mut b).unwrap();
                assert!(res.best.value() < 1e-16, "seed {seed}: {}", res.best.value());
                assert!(res.best.position.iter().all(|v| (v - 0.3).abs() < 1e-8));
                assert!(res.records.len() <= 8);
                assert!(replay_filters(&res, &cfg).is_empty());
                assert!(res.trace.windows(2).all(|w| w[1].best <= w[0].best));
                assert!(res.trace.windows(2).all(|w| w[1].evaluations >= w[0].evaluations));
                if strategy == RefinementStrategy::Passive {
                    assert!(replacement_preserves_population(&res.trace));
                }
            }
        }
    }

    #[test]
    fn passive_hybrid_dominates_pure_search() {
        let cfg = eca_config(RefinementStrategy::Passive, 3, 1, 300);
        let mut b = EvaluationBudget::new(300);
        let res = run_hybrid(&cfg, &sphere_objective(), &sphere_ls(), 11, &mut b).unwrap();
        let mut b2 = EvaluationBudget::new(300);
        let pure = eca_run(&sphere_objective(), &mut b2, 11, 10).unwrap();
        for row in &res.trace {
            let pure_best = pure
                .trace
                .points
                .iter()
                .filter(|p| p.evaluations <= row.search_evaluations)
                .map(|p| p.best)
                .last()
                .unwrap();
            assert!(row.best <= pure_best);
        }
    }

    #[test]
    fn refinement_cap_is_honoured() {
        let mut cfg = eca_config(RefinementStrategy::Active, 5, 2, 500);
        cfg.max_refinements = Some(3);
        cfg.beta0 = 1e-6;
        let mut b = EvaluationBudget::new(500);
        let res = run_hybrid(&cfg, &sphere_objective(), &sphere_ls(), 2, &mut b).unwrap();
        assert!(res.records.len() <= 3);
        let refine: u64 = res.records.iter().map(|r| r.evaluations).sum();
        assert_eq!(res.evaluations, res.search_evaluations + refine);
    }

    #[test]
    fn active_nsga2_is_rejected() {
        let cfg = HybridConfig::new(
            MetaheuristicConfig::Nsga2(Nsga2Config::new(10)),
            RefinementStrategy::Active,
            2,
            1,
            100,
        );
        let two = FnObjective::vector(4, 2, |x| vec![x[0], x[1]]);
        let mut b = EvaluationBudget::new(100);
        assert!(matches!(run_hybrid(&cfg, &two, &sphere_ls(), 0, &mut b), Err(Error::Config(_))));
    }

    #[test]
    fn nsga2_passive_runs() {
        let cfg = HybridConfig::new(
            MetaheuristicConfig::Nsga2(Nsga2Config::new(10)),
            RefinementStrategy::Passive,
            2,
            1,
            200,
        );
        let split = FnObjective::vector(4, 2, |x| {
            let a = 0.5 * ((x[0] - 0.3).powi(2) + (x[1] - 0.3).powi(2));
            let b = 0.5 * ((x[2] - 0.3).powi(2) + (x[3] - 0.3).powi(2));
            vec![a, b]
        });
        let mut b = EvaluationBudget::new(200);
        let res = run_hybrid(&cfg, &split, &sphere_ls(), 1, &mut b).unwrap();
        assert!(res.best.value() < 1e-16);
        assert!(replacement_preserves_population(&res.trace));
    }
}
