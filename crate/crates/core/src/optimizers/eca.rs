use rand::seq::index::sample;
use rand::Rng;

use super::{
    best_index, clamp_unit, default_threads, evaluate_batch, EvaluationBudget, Individual,
    Metaheuristic, Objective, Population, SearchResult, Trace,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcaConfig {
    pub n_pop: usize,
    /// Size of the peer subset drawn per individual.
    pub k: usize,
    pub eta_max: f64,
    pub threads: usize,
}

impl EcaConfig {
    pub fn new(n_pop: usize) -> Self {
        Self {
            n_pop,
            k: 7,
            eta_max: 2.0,
            threads: default_threads(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_pop < 2 || self.k < 1 || !(self.eta_max > 0.0) || self.threads == 0 {
            return Err(Error::Config("ECA needs n_pop ≥ 2, k ≥ 1, η_max > 0, threads ≥ 1".into()));
        }
        Ok(())
    }
}

/// Rank-weighted center of mass: weight `K − rank` with the best at rank 0;
/// ties share their average rank.
pub fn weighted_center(positions: &[&[f64]], values: &[f64]) -> Vec<f64> {
    let k = positions.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut rank = vec![0.0; k];
    let mut i = 0;
    while i < k {
        let mut j = i;
        while j + 1 < k && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            rank[o] = avg;
        }
        i = j + 1;
    }
    let dim = positions.first().map_or(0, |p| p.len());
    let mut center = vec![0.0; dim];
    let mut total = 0.0;
    for (p, r) in positions.iter().zip(&rank) {
        let w = k as f64 - r;
        total += w;
        for (c, v) in center.iter_mut().zip(p.iter()) {
            *c += w * v;
        }
    }
    center.iter_mut().for_each(|c| *c /= total);
    center
}

/// Evolutionary centers algorithm with greedy replacement.
#[derive(Debug, Clone)]
pub struct Eca {
    config: EcaConfig,
    population: Population,
    best: Individual,
    trace: Trace,
}

impl Eca {
    pub fn new(
        objective: &dyn Objective,
        config: EcaConfig,
        seed: u64,
        budget: &mut EvaluationBudget,
    ) -> Result<Self> {
        config.validate()?;
        if objective.n_objectives() != 1 {
            return Err(Error::invalid("ECA requires a single objective"));
        }
        let population = Population::random(objective, config.n_pop, seed, budget, config.threads);
        let best = population.individuals[best_index(&population.individuals).unwrap()].clone();
        let mut trace = Trace::default();
        trace.record(budget.search_evaluations(), best.value());
        Ok(Self {
            config,
            population,
            best,
            trace,
        })
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_result(self, evaluations: u64) -> SearchResult {
        SearchResult {
            best: self.best,
            population: self.population,
            trace: self.trace,
            evaluations,
        }
    }
}

impl Metaheuristic for Eca {
    fn step(&mut self, objective: &dyn Objective, budget: &mut EvaluationBudget) {
        let n = self.population.len();
        let k = self.config.k.min(n - 1);
        let pop = &mut self.population;
        let mut trial = Vec::with_capacity(n);
        for i in 0..n {
            let peers: Vec<usize> = sample(&mut pop.rng, n - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect();
            let pos: Vec<&[f64]> = peers.iter().map(|&j| pop.individuals[j].position.as_slice()).collect();
            let vals: Vec<f64> = peers.iter().map(|&j| pop.individuals[j].value()).collect();
            let center = weighted_center(&pos, &vals);
            let worst = (0..k)
                .max_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a)))
                .unwrap();
            let eta = pop.rng.random::<f64>() * self.config.eta_max;
            let mut x: Vec<f64> = pop.individuals[i]
                .position
                .iter()
                .zip(&center)
                .zip(pos[worst])
                .map(|((x, c), w)| x + eta * (c - w))
                .collect();
            clamp_unit(&mut x);
            trial.push(x);
        }
        let evaluated = evaluate_batch(objective, trial, self.config.threads, budget);
        for (cur, new) in pop.individuals.iter_mut().zip(evaluated) {
            if new.value() < self.best.value() {
                self.best = new.clone();
            }
            if new.value() <= cur.value() {
                *cur = new;
            }
        }
        pop.generation += 1;
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
        false
    }
}

/// Runs ECA until the budget is exhausted.
pub fn eca_run(
    objective: &dyn Objective,
    budget: &mut EvaluationBudget,
    seed: u64,
    n_pop: usize,
) -> Result<SearchResult> {
    let mut eca = Eca::new(objective, EcaConfig::new(n_pop), seed, budget)?;
    while !budget.exhausted() {
        eca.step(objective, budget);
    }
    Ok(eca.into_result(budget.search_evaluations()))
}
