use sobol::params::JoeKuoD6;
use sobol::Sobol;

use super::{
    default_threads, evaluate_batch, half_squared_norm, trust_region_gn, EvaluationBudget,
    FnObjective, Individual, LeastSquares, RefineResult, RefinerConfig, Trace,
};
use crate::error::{Error, Result};

/// Dimension limit of the embedded direction numbers.
pub const SOBOL_MAX_DIM: usize = 1000;

/// Points `1 + offset ..= count + offset` of the Sobol sequence (the origin,
/// index 0, is never returned).
pub fn sobol_sample(count: usize, dim: usize, offset: u64) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || dim > SOBOL_MAX_DIM {
        return Err(Error::invalid(format!("Sobol dimension must be in 1..={SOBOL_MAX_DIM}, got {dim}")));
    }
    let params = JoeKuoD6::standard();
    let seq = Sobol::<f64>::new(dim, &params);
    Ok(seq.skip(1 + offset as usize).take(count).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultistartConfig {
    pub n_samples: usize,
    pub n_refine: usize,
    pub seed_offset: u64,
    pub refiner: RefinerConfig,
    pub threads: usize,
}

impl MultistartConfig {
    pub fn new(n_samples: usize, n_refine: usize) -> Self {
        Self {
            n_samples,
            n_refine,
            seed_offset: 0,
            refiner: RefinerConfig::default(),
            threads: default_threads(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultistartResult {
    pub best: RefineResult,
    pub samples: Vec<Individual>,
    pub refinements: Vec<RefineResult>,
    pub trace: Trace,
    pub evaluations: u64,
}

/// Evaluates Sobol samples on the unit box, then refines the `n_refine`
/// best with [`trust_region_gn`].
pub fn multistart_run(
    problem: &dyn LeastSquares,
    config: &MultistartConfig,
    budget: &mut EvaluationBudget,
) -> Result<MultistartResult> {
    if config.n_refine > config.n_samples || config.n_samples == 0 {
        return Err(Error::Config("multi-start needs 0 < n_refine ≤ n_samples".into()));
    }
    let dim = problem.dim();
    let objective = FnObjective::scalar(dim, |x| half_squared_norm(&problem.residuals(x)));
    let mut trace = Trace::default();
    let mut samples = Vec::with_capacity(config.n_samples);
    let points = sobol_sample(config.n_samples, dim, config.seed_offset)?;
    // Batches keep the budget check between groups of evaluations.
    let batch = config.threads.max(1) * 8;
    for chunk in points.chunks(batch) {
        if budget.exhausted() {
            break;
        }
        let evaluated = evaluate_batch(&objective, chunk.to_vec(), config.threads, budget);
        for ind in &evaluated {
            trace.record(budget.total_evaluations(), ind.value());
        }
        samples.extend(evaluated);
    }
    let mut order: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].feasible).collect();
    order.sort_by(|&a, &b| samples[a].value().total_cmp(&samples[b].value()).then(a.cmp(&b)));
    let (lower, upper) = (vec![0.0; dim], vec![1.0; dim]);
    let mut refinements = Vec::new();
    for &i in order.iter().take(config.n_refine) {
        let res = trust_region_gn(&samples[i].position, problem, &lower, &upper, &config.refiner)?;
        budget.charge_refinement(res.evaluations());
        trace.record(budget.total_evaluations(), res.objective);
        refinements.push(res);
    }
    let best = refinements
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .cloned()
        .or_else(|| {
            order.first().map(|&i| RefineResult {
                x: samples[i].position.clone(),
                objective: samples[i].value(),
                status: super::RefineStatus::MaxIterations,
                iterations: 0,
                residual_evaluations: 0,
                jacobian_evaluations: 0,
            })
        })
        .ok_or_else(|| Error::DegenerateData("every multi-start sample failed".into()))?;
    Ok(MultistartResult {
        best,
        samples,
        refinements,
        trace,
        evaluations: budget.total_evaluations(),
    })
}
