//! The five subcommands, as library functions returning what they wrote.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use adrfit::chroma::{chromatography_semidiscrete, SmaParameters, PROTEINS};
use adrfit::estimation::{
    simulate_experiment, simulate_outlet, synthesize_experiment, CalibrationObjective, CalibrationProblem,
    Experiment, FractionData, MeasurementKind, ObjectiveForm, UvSeries, FAILURE_OBJECTIVE,
};
use adrfit::hybrid::{decay_for, inner_iterations, run_hybrid, HybridConfig, MetaheuristicConfig, Phase, RefinementStrategy};
use adrfit::optimizers::{
    multistart_run, Eca, EcaConfig, EvaluationBudget, Metaheuristic, MultistartConfig, Nsga2, Nsga2Config, RefineResult,
    Trace,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    strictly_increasing, thin, NamedObjective, ParameterEstimate, RefinementRecord, ResultBundle, RunMetadata,
    RunStatistics, TraceRow,
};
use crate::config::{Method, Role, RunConfig};
use crate::error::CliError;
use crate::io::{fmt_f64, fraction_path, read_measurements, uv_path, write_fractions, write_rows, write_uv};

/// Physical parameters with their scaled coordinates, as stored in ground
/// truth records and bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecord {
    pub parameters: Vec<ParameterEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub seed: u64,
    pub noise_relative: f64,
    pub parameters: Vec<ParameterEstimate>,
}

fn estimates(cfg: &RunConfig, physical: &[f64]) -> Result<Vec<ParameterEstimate>, CliError> {
    let space = cfg.space()?;
    let scaled = space
        .scale(physical)
        .map_err(|e| CliError::Data(format!("parameters outside the configured bounds: {e}")))?;
    Ok(space
        .names()
        .iter()
        .zip(physical)
        .zip(scaled)
        .map(|((n, &p), s)| ParameterEstimate {
            name: n.clone(),
            physical: p,
            scaled: s,
        })
        .collect())
}

/// Reads physical parameters from a bundle or ground-truth JSON file.
pub fn load_parameters(path: &Path, cfg: &RunConfig) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read parameters {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let rec: ParameterRecord = serde_json::from_value(serde_json::json!({ "parameters": value["parameters"] }))
        .map_err(|e| CliError::Data(format!("{}: no usable `parameters` list: {e}", path.display())))?;
    let names = cfg.space()?.names().to_vec();
    names
        .iter()
        .map(|n| {
            rec.parameters
                .iter()
                .find(|p| &p.name == n)
                .map(|p| p.physical)
                .ok_or_else(|| CliError::Data(format!("{}: parameter `{n}` missing", path.display())))
        })
        .collect()
}

fn ground_truth(cfg: &RunConfig) -> Result<Vec<f64>, CliError> {
    cfg.ground_truth()
        .map(|g| g.to_vec())
        .ok_or_else(|| CliError::Config("parameters.ground_truth is required for this command".into()))
}

fn json_to(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Outlet profiles of every experiment plus, where measurement files exist,
/// noise-free predictions on the same schedule.
pub fn cmd_simulate(cfg: &RunConfig, parameters: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let p = match parameters {
        Some(path) => load_parameters(path, cfg)?,
        None => ground_truth(cfg)?,
    };
    SmaParameters::from_slice(&p)?.validate()?;
    let column = cfg.column();
    let uv_model = cfg.uv_model()?;
    let settings = cfg.settings();
    let mut written = Vec::new();
    for e in &cfg.experiments {
        let program = cfg.program(e);
        let sd = chromatography_semidiscrete(&column, &program, settings.discretization)?;
        let t_end = program.duration_s(&column);
        let n = cfg.sampling.outlet_points;
        let grid: Vec<f64> = (0..n).map(|k| (t_end * k as f64 / (n - 1) as f64).min(t_end)).collect();
        let prof = simulate_outlet(&sd, &p, &grid, t_end, &settings)?;
        let rows = prof.times.iter().zip(&prof.outlet).map(|(t, c)| {
            let mut row = vec![fmt_f64(*t), fmt_f64(uv_model.observe(&c[1..4]))];
            row.extend(c.iter().map(|v| fmt_f64(*v)));
            row
        });
        let path = out.join(format!("{}_outlet.csv", e.id));
        write_rows(
            &path,
            &["time_s", "absorbance", "salt_mol_l", "A1_mol_l", "A2_mol_l", "M_mol_l"],
            rows,
        )?;
        written.push(path);

        let (uv, fractions) = read_measurements(&cfg.paths.data_dir, &e.id)?;
        if uv.is_none() && fractions.is_none() {
            continue;
        }
        let exp = Experiment {
            id: e.id.clone(),
            program,
            uv,
            fractions,
        };
        let pred = simulate_experiment(&sd, &column, &uv_model, &exp, &p, &settings, false)?;
        if let Some(uv) = &exp.uv {
            let path = out.join(format!("{}_uv_predicted.csv", e.id));
            write_uv(&path, &UvSeries::new(uv.times.clone(), pred.uv.clone())?)?;
            written.push(path);
        }
        if let Some(fr) = &exp.fractions {
            let path = out.join(format!("{}_fractions_predicted.csv", e.id));
            write_fractions(&path, &FractionData::new(fr.schedule.clone(), pred.fractions.clone())?)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Synthetic measurement files for every configured experiment plus the
/// ground-truth record.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let truth = ground_truth(cfg)?;
    let column = cfg.column();
    let uv_model = cfg.uv_model()?;
    let settings = cfg.settings();
    let plan = cfg.sampling_plan();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut written = Vec::new();
    for e in &cfg.experiments {
        let program = cfg.program(e);
        let exp = synthesize_experiment(&e.id, &column, &uv_model, &program, &truth, &settings, &plan, &mut rng)?;
        if let Some(uv) = &exp.uv {
            let path = uv_path(out, &e.id);
            write_uv(&path, uv)?;
            written.push(path);
        }
        if let Some(fr) = &exp.fractions {
            let path = fraction_path(out, &e.id);
            write_fractions(&path, fr)?;
            written.push(path);
        }
    }
    let record = GroundTruthRecord {
        seed: cfg.seed,
        noise_relative: plan.noise_relative,
        parameters: estimates(cfg, &truth)?,
    };
    let path = out.join("ground_truth.json");
    json_to(&path, &record)?;
    written.push(path);
    Ok(written)
}

fn load_experiments(cfg: &RunConfig, role: Role) -> Result<Vec<Experiment>, CliError> {
    cfg.experiments_with(role)
        .map(|e| {
            let (uv, fractions) = read_measurements(&cfg.paths.data_dir, &e.id)?;
            if uv.is_none() && fractions.is_none() {
                return Err(CliError::Data(format!(
                    "no measurements for experiment `{}`: expected {} and/or {}",
                    e.id,
                    uv_path(&cfg.paths.data_dir, &e.id).display(),
                    fraction_path(&cfg.paths.data_dir, &e.id).display()
                )));
            }
            Ok(Experiment {
                id: e.id.clone(),
                program: cfg.program(e),
                uv,
                fractions,
            })
        })
        .collect()
}

/// The calibration problem assembled from the configured data files.
pub fn calibration_problem(cfg: &RunConfig) -> Result<CalibrationProblem, CliError> {
    let experiments = load_experiments(cfg, Role::Calibration)?;
    Ok(CalibrationProblem::new(
        cfg.column(),
        cfg.uv_model()?,
        cfg.space()?,
        experiments,
        cfg.settings(),
    )?)
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Init => "init",
        Phase::Search => "search",
        Phase::Selection => "selection",
        Phase::Refinement => "refinement",
        Phase::Replacement => "replacement",
    }
}

fn trace_rows(trace: &Trace, phase: &str) -> Vec<TraceRow> {
    trace
        .points
        .iter()
        .map(|p| TraceRow {
            evaluations: p.evaluations,
            best_objective: p.best,
            phase: phase.into(),
        })
        .collect()
}

fn refine_record(r: &RefineResult, start: &[f64]) -> RefinementRecord {
    RefinementRecord {
        outer: None,
        start: start.to_vec(),
        refined: r.x.clone(),
        objective: r.objective,
        radius: adrfit::hybrid::normalized_distance(start, &r.x).unwrap_or(0.0),
        iterations: r.iterations,
        evaluations: r.evaluations(),
        status: format!("{:?}", r.status),
    }
}

fn measurement_name(k: &MeasurementKind) -> String {
    match k {
        MeasurementKind::Uv => "uv".into(),
        MeasurementKind::Fraction { component } => format!("fraction_{}", PROTEINS[*component]),
    }
}

struct Outcome {
    best: Vec<f64>,
    best_value: f64,
    trace: Vec<TraceRow>,
    refinements: Vec<RefinementRecord>,
    outer_iterations: usize,
    phase_wall: Vec<(u64, f64)>,
}

fn run_metaheuristic(
    mut meta: Box<dyn Metaheuristic>,
    objective: &CalibrationObjective,
    budget: &mut EvaluationBudget,
) -> (Vec<f64>, f64, Trace) {
    let mut trace = Trace::default();
    trace.record(budget.search_evaluations(), meta.best().value());
    while !budget.exhausted() {
        meta.step(objective, budget);
        trace.record(budget.search_evaluations(), meta.best().value());
    }
    let best = meta.best();
    (best.position.clone(), best.value(), trace)
}

fn optimize(cfg: &RunConfig, problem: &CalibrationProblem) -> Result<(Outcome, EvaluationBudget), CliError> {
    let method = cfg.optimizer.method;
    let n_pop = cfg.optimizer.population;
    let threads = cfg.threads();
    let search = cfg.budget.evaluations;
    let refiner = cfg.refiner.to_config()?;
    let wall = cfg.budget.seconds.map(Duration::from_secs_f64);
    let make_budget = |n: u64| {
        let b = EvaluationBudget::new(n);
        match wall {
            Some(w) => b.with_wall_time(w),
            None => b,
        }
    };
    let eca_cfg = EcaConfig { threads, ..EcaConfig::new(n_pop) };
    let nsga_cfg = Nsga2Config { threads, ..Nsga2Config::new(n_pop) };
    let scalar = CalibrationObjective::new(problem, ObjectiveForm::Total);
    let multi = CalibrationObjective::new(problem, cfg.optimizer.decomposition.form());
    let seed = cfg.seed;
    match method {
        Method::Eca | Method::Nsga2 => {
            // Pure metaheuristics convert the refinement allowance into search evaluations.
            let extra = cfg.budget.refinements as u64 * cfg.budget.evaluations_per_refinement;
            let mut budget = make_budget(search + extra);
            let (meta, obj): (Box<dyn Metaheuristic>, &CalibrationObjective) = if method == Method::Eca {
                (Box::new(Eca::new(&scalar, eca_cfg, seed, &mut budget)?), &scalar)
            } else {
                (Box::new(Nsga2::new(&multi, nsga_cfg, seed, &mut budget)?), &multi)
            };
            let (best, best_value, trace) = run_metaheuristic(meta, obj, &mut budget);
            Ok((
                Outcome {
                    best,
                    best_value,
                    trace: thin(trace_rows(&trace, "search")),
                    refinements: Vec::new(),
                    outer_iterations: 0,
                    phase_wall: Vec::new(),
                },
                budget,
            ))
        }
        Method::Multistart => {
            let mut budget = make_budget(search);
            let ms = MultistartConfig {
                n_samples: search as usize,
                n_refine: cfg.budget.refinements.min(search as usize),
                seed_offset: seed.wrapping_mul(search),
                refiner,
                threads,
            };
            let res = multistart_run(problem, &ms, &mut budget)?;
            let mut order: Vec<usize> = (0..res.samples.len()).filter(|&i| res.samples[i].feasible).collect();
            order.sort_by(|&a, &b| res.samples[a].value().total_cmp(&res.samples[b].value()).then(a.cmp(&b)));
            let refinements = res
                .refinements
                .iter()
                .zip(&order)
                .map(|(r, &i)| refine_record(r, &res.samples[i].position))
                .collect();
            let n_samples = res.samples.len() as u64;
            let rows = res
                .trace
                .points
                .iter()
                .map(|p| TraceRow {
                    evaluations: p.evaluations,
                    best_objective: p.best,
                    phase: if p.evaluations <= n_samples { "search" } else { "refinement" }.into(),
                })
                .collect();
            Ok((
                Outcome {
                    best: res.best.x.clone(),
                    best_value: res.best.objective,
                    trace: thin(rows),
                    refinements,
                    outer_iterations: 0,
                    phase_wall: Vec::new(),
                },
                budget,
            ))
        }
        Method::HybridEcaPassive | Method::HybridEcaActive | Method::HybridNsga2Passive | Method::HybridNsga2Active => {
            let (meta, strategy) = match method {
                Method::HybridEcaPassive => (MetaheuristicConfig::Eca(eca_cfg), RefinementStrategy::Passive),
                Method::HybridEcaActive => (MetaheuristicConfig::Eca(eca_cfg), RefinementStrategy::Active),
                Method::HybridNsga2Passive => (MetaheuristicConfig::Nsga2(nsga_cfg), RefinementStrategy::Passive),
                _ => (MetaheuristicConfig::Nsga2(nsga_cfg), RefinementStrategy::Active),
            };
            let h = &cfg.hybrid;
            let hc = HybridConfig {
                n_outer: h.outer_iterations,
                n_inner: inner_iterations(search, h.outer_iterations, n_pop),
                n_cand: h.candidates,
                critical_distance: h.critical_distance,
                beta0: h.beta_initial,
                rho: decay_for(h.outer_iterations, h.beta_initial * h.critical_distance, h.min_critical_distance),
                strategy,
                refiner,
                metaheuristic: meta,
                max_refinements: Some(cfg.budget.refinements),
            };
            hc.validate()?;
            let mut budget = make_budget(search);
            let obj = if meta.is_multi_objective() { &multi } else { &scalar };
            let res = run_hybrid(&hc, obj, problem, seed, &mut budget)?;
            let rows = res
                .trace
                .iter()
                .map(|r| TraceRow {
                    evaluations: r.evaluations,
                    best_objective: r.best,
                    phase: phase_name(r.phase).into(),
                })
                .collect();
            let refinements = res
                .records
                .iter()
                .map(|r| RefinementRecord {
                    outer: Some(r.outer),
                    start: r.start.clone(),
                    refined: r.refined.clone(),
                    objective: r.objective,
                    radius: r.radius,
                    iterations: r.iterations,
                    evaluations: r.evaluations,
                    status: if r.failed { "Failed" } else { "Refined" }.into(),
                })
                .collect();
            let phase_wall = res.trace.iter().map(|r| (r.evaluations, r.wall_s)).collect();
            Ok((
                Outcome {
                    best: res.best.position.clone(),
                    best_value: res.best.value(),
                    trace: rows,
                    refinements,
                    outer_iterations: res.outer_completed,
                    phase_wall,
                },
                budget,
            ))
        }
    }
}

pub struct EstimateOutput {
    pub bundle: ResultBundle,
    pub metadata: RunMetadata,
    pub files: Vec<PathBuf>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Runs the configured optimizer and writes `<method>-seed<seed>` bundle,
/// trace CSV and metadata sidecar into `out`.
pub fn cmd_estimate(cfg: &RunConfig, out: &Path) -> Result<EstimateOutput, CliError> {
    if cfg.optimizer.method == Method::HybridNsga2Active {
        return Err(CliError::Config(
            "optimizer hybrid-nsga2-active is not supported: active refinement cannot manipulate a multi-objective population"
                .into(),
        ));
    }
    let started = unix_now();
    let clock = Instant::now();
    let problem = calibration_problem(cfg)?;
    let (outcome, budget) = optimize(cfg, &problem)?;
    if !(outcome.best_value < FAILURE_OBJECTIVE) {
        return Err(CliError::Budget("no evaluated point produced a successful simulation".into()));
    }
    let eval = problem.evaluate(&outcome.best);
    if eval.failed {
        return Err(CliError::Simulation("re-evaluation of the best point failed".into()));
    }
    let physical = problem.space().unscale(&outcome.best);
    let bundle = ResultBundle {
        method: cfg.optimizer.method.name().into(),
        seed: cfg.seed,
        objective: eval.objective,
        parameters: problem
            .space()
            .names()
            .iter()
            .zip(&physical)
            .zip(&outcome.best)
            .map(|((n, &p), &s)| ParameterEstimate {
                name: n.clone(),
                physical: p,
                scaled: s,
            })
            .collect(),
        by_experiment: problem
            .experiments()
            .iter()
            .zip(&eval.by_experiment)
            .map(|(e, &v)| NamedObjective {
                name: e.id.clone(),
                objective: v,
            })
            .collect(),
        by_measurement: problem
            .measurement_types()
            .iter()
            .zip(&eval.by_measurement)
            .map(|(k, &v)| NamedObjective {
                name: measurement_name(k),
                objective: v,
            })
            .collect(),
        trace: strictly_increasing(outcome.trace),
        refinements: outcome.refinements,
        statistics: RunStatistics {
            search_evaluations: budget.search_evaluations(),
            refinement_evaluations: budget.refinement_evaluations(),
            total_evaluations: budget.total_evaluations(),
            refinements: 0,
            outer_iterations: outcome.outer_iterations,
            rtol: cfg.solver.rtol,
            atol: cfg.solver.atol,
        },
    };
    let mut bundle = bundle;
    bundle.statistics.refinements = bundle.refinements.len();
    let stem = format!("{}-seed{}", bundle.method, bundle.seed);
    let bundle_path = out.join(format!("{stem}.bundle.json"));
    let trace_path = out.join(format!("{stem}.trace.csv"));
    let meta_path = out.join(format!("{stem}.meta.json"));
    std::fs::create_dir_all(out)?;
    std::fs::write(&bundle_path, bundle.to_json())?;
    write_convergence(&trace_path, &bundle.trace)?;
    let metadata = RunMetadata {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        wall_s: clock.elapsed().as_secs_f64(),
        trace_wall_s: outcome.phase_wall,
    };
    json_to(&meta_path, &metadata)?;
    Ok(EstimateOutput {
        bundle,
        metadata,
        files: vec![bundle_path, trace_path, meta_path],
    })
}

pub fn write_convergence(path: &Path, trace: &[TraceRow]) -> Result<(), CliError> {
    write_rows(
        path,
        &["evaluations", "best_objective", "phase"],
        trace
            .iter()
            .map(|r| vec![r.evaluations.to_string(), fmt_f64(r.best_objective), r.phase.clone()]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupError {
    pub uv: f64,
    pub components: Vec<NamedObjective>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentValidation {
    pub experiment: String,
    pub uv_rss: Option<f64>,
    pub fraction_rss: Vec<NamedObjective>,
    pub total_rss: f64,
    /// Relative sup-norm of the outlet curves against the ground truth.
    pub outlet_sup_rel_error: Option<SupError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub method: String,
    pub seed: u64,
    pub experiments: Vec<ExperimentValidation>,
}

/// `max |a − b| / max |b|`, zero for an all-zero reference.
fn sup_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

/// Simulates the validation experiments at the bundle's parameters.
pub fn cmd_validate(cfg: &RunConfig, bundle_path: &Path, out: &Path) -> Result<ValidationReport, CliError> {
    let bundle = ResultBundle::load(bundle_path)?;
    let p = load_parameters(bundle_path, cfg)?;
    let experiments = load_experiments(cfg, Role::Validation)?;
    if experiments.is_empty() {
        return Err(CliError::Config("no experiment has role = \"validation\"".into()));
    }
    let column = cfg.column();
    let uv_model = cfg.uv_model()?;
    let settings = cfg.settings();
    let truth = cfg.ground_truth().map(|g| g.to_vec());
    let mut rows = Vec::new();
    for exp in &experiments {
        let sd = chromatography_semidiscrete(&column, &exp.program, settings.discretization)?;
        let pred = simulate_experiment(&sd, &column, &uv_model, exp, &p, &settings, false)?;
        let rss = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let uv_rss = exp.uv.as_ref().map(|uv| rss(&pred.uv, &uv.values));
        let fraction_rss: Vec<NamedObjective> = match &exp.fractions {
            None => Vec::new(),
            Some(f) => f
                .schedule
                .components()
                .iter()
                .enumerate()
                .map(|(j, &c)| {
                    let model: Vec<f64> = pred.fractions.iter().map(|r| r[j]).collect();
                    NamedObjective {
                        name: PROTEINS[c].into(),
                        objective: rss(&model, &f.component_series(j)),
                    }
                })
                .collect(),
        };
        let total_rss = uv_rss.unwrap_or(0.0) + fraction_rss.iter().map(|f| f.objective).sum::<f64>();
        let outlet_sup_rel_error = match &truth {
            None => None,
            Some(t) => {
                let t_end = exp.program.duration_s(&column);
                let n = cfg.sampling.outlet_points;
                let grid: Vec<f64> = (0..n).map(|k| (t_end * k as f64 / (n - 1) as f64).min(t_end)).collect();
                let fit = simulate_outlet(&sd, &p, &grid, t_end, &settings)?;
                let reference = simulate_outlet(&sd, t, &grid, t_end, &settings)?;
                let uv = |prof: &adrfit::estimation::OutletProfile| -> Vec<f64> {
                    prof.outlet.iter().map(|c| uv_model.observe(&c[1..4])).collect()
                };
                let col = |prof: &adrfit::estimation::OutletProfile, i: usize| -> Vec<f64> {
                    prof.outlet.iter().map(|c| c[i]).collect()
                };
                Some(SupError {
                    uv: sup_rel(&uv(&fit), &uv(&reference)),
                    components: (0..3)
                        .map(|i| NamedObjective {
                            name: PROTEINS[i].into(),
                            objective: sup_rel(&col(&fit, i + 1), &col(&reference, i + 1)),
                        })
                        .collect(),
                })
            }
        };
        rows.push(ExperimentValidation {
            experiment: exp.id.clone(),
            uv_rss,
            fraction_rss,
            total_rss,
            outlet_sup_rel_error,
        });
    }
    let report = ValidationReport {
        method: bundle.method.clone(),
        seed: bundle.seed,
        experiments: rows,
    };
    json_to(&out.join(format!("{}-seed{}.validation.json", bundle.method, bundle.seed)), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    pub objective: f64,
    pub evaluations: u64,
}

/// Best-objective table (ascending) and one convergence CSV per bundle.
pub fn cmd_report(bundles: &[PathBuf], out: &Path) -> Result<(Vec<ReportRow>, String), CliError> {
    if bundles.is_empty() {
        return Err(CliError::Config("report needs at least one bundle".into()));
    }
    let mut rows = Vec::new();
    for path in bundles {
        let b = ResultBundle::load(path)?;
        write_convergence(&out.join(format!("convergence_{}_seed{}.csv", b.method, b.seed)), &b.trace)?;
        rows.push(ReportRow {
            method: b.method,
            seed: b.seed,
            objective: b.objective,
            evaluations: b.statistics.total_evaluations,
        });
    }
    rows.sort_by(|a, b| {
        a.objective
            .total_cmp(&b.objective)
            .then_with(|| a.method.cmp(&b.method))
            .then(a.seed.cmp(&b.seed))
    });
    write_rows(
        &out.join("report.csv"),
        &["method", "seed", "best_objective", "evaluations"],
        rows.iter()
            .map(|r| vec![r.method.clone(), r.seed.to_string(), fmt_f64(r.objective), r.evaluations.to_string()]),
    )?;
    let mut table = String::from("| method | seed | best objective | evaluations |\n|---|---|---|---|\n");
    for r in &rows {
        table.push_str(&format!("| {} | {} | {:.6e} | {} |\n", r.method, r.seed, r.objective, r.evaluations));
    }
    Ok((rows, table))
}
