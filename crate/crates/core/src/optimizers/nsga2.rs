use rand::Rng;

use super::{
    clamp_unit, default_threads, evaluate_batch, EvaluationBudget, Individual, Metaheuristic,
    Objective, Population, SearchResult, Trace,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nsga2Config {
    pub n_pop: usize,
    pub eta_c: f64,
    pub crossover_rate: f64,
    pub eta_m: f64,
    /// Per-variable mutation probability; `None` means `1/n`.
    pub mutation_rate: Option<f64>,
    pub threads: usize,
}

impl Nsga2Config {
    pub fn new(n_pop: usize) -> Self {
        Self {
            n_pop,
            eta_c: 15.0,
            crossover_rate: 0.9,
            eta_m: 20.0,
            mutation_rate: None,
            threads: default_threads(),
        }
    }
}

fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Pareto fronts in dominance order; indices ascending within each front.
pub fn non_dominated_sort(objectives: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = objectives.len();
    let mut dominated_by_count = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&objectives[i], &objectives[j]) {
                dominates_list[i].push(j);
                dominated_by_count[j] += 1;
            } else if dominates(&objectives[j], &objectives[i]) {
                dominates_list[j].push(i);
                dominated_by_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by_count[j] -= 1;
                if dominated_by_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distances of the members of one front.
pub fn crowding_distance(front: &[Vec<f64>]) -> Vec<f64> {
    let n = front.len();
    let mut d = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for m in 0..front[0].len() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a][m].total_cmp(&front[b][m]).then(a.cmp(&b)));
        let (lo, hi) = (front[order[0]][m], front[order[n - 1]][m]);
        d[order[0]] = f64::INFINITY;
        d[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range > 0.0 {
            for w in 1..n - 1 {
                d[order[w]] += (front[order[w + 1]][m] - front[order[w - 1]][m]) / range;
            }
        }
    }
    d
}

/// NSGA-II with SBX crossover, polynomial mutation and (μ+λ) selection.
#[derive(Debug, Clone)]
pub struct Nsga2 {
    config: Nsga2Config,
    population: Population,
    rank: Vec<usize>,
    crowding: Vec<f64>,
    best: Individual,
    trace: Trace,
}

impl Nsga2 {
    pub fn new(
        objective: &dyn Objective,
        config: Nsga2Config,
        seed: u64,
        budget: &mut EvaluationBudget,
    ) -> Result<Self> {
        if objective.n_objectives() < 2 {
            return Err(Error::invalid("NSGA-II requires at least two objectives"));
        }
        if config.n_pop < 2 || config.threads == 0 {
            return Err(Error::Config("NSGA-II needs n_pop ≥ 2 and threads ≥ 1".into()));
        }
        let population = Population::random(objective, config.n_pop, seed, budget, config.threads);
        let best = population.individuals[super::best_index(&population.individuals).unwrap()].clone();
        let mut me = Self {
            config,
            population,
            rank: Vec::new(),
            crowding: Vec::new(),
            best,
            trace: Trace::default(),
        };
        me.refresh_ranks();
        me.trace.record(budget.search_evaluations(), me.best.value());
        Ok(me)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Current first front.
    pub fn pareto_front(&self) -> Vec<&Individual> {
        self.population
            .individuals
            .iter()
            .zip(&self.rank)
            .filter(|(_, &r)| r == 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn into_result(self, evaluations: u64) -> SearchResult {
        SearchResult {
            best: self.best,
            population: self.population,
            trace: self.trace,
            evaluations,
        }
    }

    fn refresh_ranks(&mut self) {
        let objs: Vec<Vec<f64>> = self.population.individuals.iter().map(|i| i.objectives.clone()).collect();
        let n = objs.len();
        self.rank = vec![0; n];
        self.crowding = vec![0.0; n];
        for (r, front) in non_dominated_sort(&objs).iter().enumerate() {
            let members: Vec<Vec<f64>> = front.iter().map(|&i| objs[i].clone()).collect();
            for (&i, d) in front.iter().zip(crowding_distance(&members)) {
                self.rank[i] = r;
                self.crowding[i] = d;
            }
        }
    }

    fn tournament(&mut self) -> usize {
        let n = self.population.len();
        let a = self.population.rng.random_range(0..n);
        let b = self.population.rng.random_range(0..n);
        let better = |x: usize, y: usize| {
            self.rank[x] < self.rank[y] || (self.rank[x] == self.rank[y] && self.crowding[x] > self.crowding[y])
        };
        if better(b, a) {
            b
        } else {
            a
        }
    }

    fn sbx(&mut self, p1: &[f64], p2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rng = &mut self.population.rng;
        let mut c1 = p1.to_vec();
        let mut c2 = p2.to_vec();
        if rng.random::<f64>() > self.config.crossover_rate {
            return (c1, c2);
        }
        let eta = self.config.eta_c;
        for i in 0..p1.len() {
            if rng.random::<f64>() > 0.5 || (p1[i] - p2[i]).abs() < 1e-14 {
                continue;
            }
            let (y1, y2) = if p1[i] < p2[i] { (p1[i], p2[i]) } else { (p2[i], p1[i]) };
            let (lo, hi) = (0.0, 1.0);
            let u = rng.random::<f64>();
            let child = |beta_bound: f64| {
                let alpha = 2.0 - beta_bound.powf(-(eta + 1.0));
                let bq = if u <= 1.0 / alpha {
                    (u * alpha).powf(1.0 / (eta + 1.0))
                } else {
                    (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
                };
                bq
            };
            let b1 = 1.0 + 2.0 * (y1 - lo) / (y2 - y1);
            let b2 = 1.0 + 2.0 * (hi - y2) / (y2 - y1);
            let v1 = 0.5 * ((y1 + y2) - child(b1) * (y2 - y1));
            let v2 = 0.5 * ((y1 + y2) + child(b2) * (y2 - y1));
            let (v1, v2) = (v1.clamp(lo, hi), v2.clamp(lo, hi));
            if rng.random::<f64>() < 0.5 {
                c1[i] = v2;
                c2[i] = v1;
            } else {
                c1[i] = v1;
                c2[i] = v2;
            }
        }
        (c1, c2)
    }

    fn mutate(&mut self, x: &mut [f64]) {
        let rate = self.config.mutation_rate.unwrap_or(1.0 / x.len() as f64);
        let eta = self.config.eta_m;
        let rng = &mut self.population.rng;
        for v in x.iter_mut() {
            if rng.random::<f64>() >= rate {
                continue;
            }
            let (d1, d2) = (*v, 1.0 - *v);
            let u = rng.random::<f64>();
            let mpow = 1.0 / (eta + 1.0);
            let dq = if u < 0.5 {
                let val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(eta + 1.0);
                val.powf(mpow) - 1.0
            } else {
                let val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(eta + 1.0);
                1.0 - val.powf(mpow)
            };
            *v += dq;
        }
        clamp_unit(x);
    }
}

impl Metaheuristic for Nsga2 {
    fn step(&mut self, objective: &dyn Objective, budget: &mut EvaluationBudget) {
        let n = self.population.len();
        let mut children = Vec::with_capacity(n + 1);
        while children.len() < n {
            let a = self.tournament();
            let b = self.tournament();
            let pa = self.population.individuals[a].position.clone();
            let pb = self.population.individuals[b].position.clone();
            let (mut c1, mut c2) = self.sbx(&pa, &pb);
            self.mutate(&mut c1);
            self.mutate(&mut c2);
            children.push(c1);
            children.push(c2);
        }
        children.truncate(n);
        let offspring = evaluate_batch(objective, children, self.config.threads, budget);
        for o in &offspring {
            self.observe(o);
        }
        let mut merged = std::mem::take(&mut self.population.individuals);
        merged.extend(offspring);
        let objs: Vec<Vec<f64>> = merged.iter().map(|i| i.objectives.clone()).collect();
        let mut keep = Vec::with_capacity(n);
        for front in non_dominated_sort(&objs) {
            if keep.len() + front.len() <= n {
                keep.extend(front);
            } else {
                let members: Vec<Vec<f64>> = front.iter().map(|&i| objs[i].clone()).collect();
                let d = crowding_distance(&members);
                let mut order: Vec<usize> = (0..front.len()).collect();
                order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
                keep.extend(order.into_iter().take(n - keep.len()).map(|k| front[k]));
            }
            if keep.len() == n {
                break;
            }
        }
        let mut slots: Vec<Option<Individual>> = merged.into_iter().map(Some).collect();
        self.population.individuals = keep.into_iter().map(|i| slots[i].take().unwrap()).collect();
        self.population.generation += 1;
        self.refresh_ranks();
        self.trace.record(budget.search_evaluations(), self.best.value());
    }

    fn population(&self) -> &Population {
        &self.population
    }

    fn population_mut(&mut self) -> &mut Population {
        &mut self.population
    }

    fn best(&self) -> &Individual {
        &self.best
    }

    fn observe(&mut self, individual: &Individual) {
        if individual.value() < self.best.value() {
            self.best = individual.clone();
        }
    }

    fn is_multi_objective(&self) -> bool {
        true
    }
}

/// Runs NSGA-II until the budget is exhausted.
pub fn nsga2_run(
    objective: &dyn Objective,
    budget: &mut EvaluationBudget,
    seed: u64,
    n_pop: usize,
) -> Result<SearchResult> {
    let mut ga = Nsga2::new(objective, Nsga2Config::new(n_pop), seed, budget)?;
    while !budget.exhausted() {
        ga.step(objective, budget);
    }
    Ok(ga.into_result(budget.search_evaluations()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::FnObjective;

    #[test]
    fn sorting_examples() {
        let pts = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![3.0, 3.0]];
        assert_eq!(non_dominated_sort(&pts), vec![vec![0, 1], vec![2]]);
        assert_eq!(non_dominated_sort(&[vec![1.0, 1.0]]), vec![vec![0]]);
        let same = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(non_dominated_sort(&same), vec![vec![0, 1]]);
    }

    #[test]
    fn crowding_examples() {
        let two = crowding_distance(&[vec![0.0], vec![1.0]]);
        assert!(two.iter().all(|d| d.is_infinite()));
        let three = crowding_distance(&[vec![0.0], vec![1.0], vec![2.0]]);
        assert_eq!(three[1], 1.0);
        assert!(three[0].is_infinite() && three[2].is_infinite());
        let dup = crowding_distance(&[vec![0.0], vec![1.0], vec![1.0], vec![2.0]]);
        assert_eq!(dup[1] + dup[2], 1.0);
    }

    #[test]
    fn rejects_single_objective() {
        let obj = FnObjective::vector(1, 1, |x| vec![x[0]]);
        let mut b = EvaluationBudget::new(10);
        assert!(matches!(nsga2_run(&obj, &mut b, 0, 10), Err(Error::InvalidInput(_))));
    }

    fn biobjective() -> FnObjective<'static> {
        FnObjective::vector(2, 2, |x| vec![x[0] * x[0], (x[0] - 1.0).powi(2)])
    }

    #[test]
    fn front_spans_extremes() {
        let mut b = EvaluationBudget::new(4000);
        let mut ga = Nsga2::new(&biobjective(), Nsga2Config::new(40), 5, &mut b).unwrap();
        while !b.exhausted() {
            ga.step(&biobjective(), &mut b);
        }
        let xs: Vec<f64> = ga.pareto_front().iter().map(|i| i.position[0]).collect();
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= 0.05 && hi >= 0.95, "front spans [{lo}, {hi}]");
        assert!(b.search_evaluations() <= 4000 + 40);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let run = || {
            let mut b = EvaluationBudget::new(300);
            nsga2_run(&biobjective(), &mut b, 9, 20).unwrap()
        };
        let (a, c) = (run(), run());
        assert_eq!(a.trace, c.trace);
        assert_eq!(a.population.fingerprint(), c.population.fingerprint());
    }
}
