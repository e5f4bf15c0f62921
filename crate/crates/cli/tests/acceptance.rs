//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ADRFIT_ACCEPTANCE=full` runs the calibration criteria (5, 6) at the desk
//! budget; the default runs them at the reduced budget pinned below and says
//! so on the line. The process exits 0 either way; failures are reported, not
//! hidden.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use adrfit::adr::{AdrSystem, ComponentSet, InitialProfile, InletProgram, Mobility, StoichiometricKinetics, TransportCoefficients};
use adrfit::chroma::{chromatography_semidiscrete, ColumnConfig, Discretization, ProcessProgram, SmaParameters, UvModel};
use adrfit::dg::{build_mesh, gauss_legendre, semidiscretize};
use adrfit::esdirk::{integrate, FnSystem, IntegratorConfig};
use adrfit::estimation::{
    protein_mass_balance, synthesize_experiment, CalibrationProblem, ParameterSpace, SamplingPlan, SolverSettings,
};
use adrfit::hybrid::{
    beta_after, decay_for, diversity_filter, normalized_distance, proximity_filter, replace, replay_filters, run_hybrid,
    CandidateRecord, HybridConfig, MetaheuristicConfig, RefinementStrategy,
};
use adrfit::optimizers::{EcaConfig, EvaluationBudget, FnLeastSquares, FnObjective, Individual, Population};
use adrfit_cli::commands::{cmd_estimate, cmd_generate, cmd_validate};
use adrfit_cli::config::{Method, DEFAULT_CONFIG};
use adrfit_cli::RunConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances from the acceptance criteria.
const DG_MIN_ORDER: f64 = 3.0;
const ESDIRK_ORDER: f64 = 2.0;
const ESDIRK_ORDER_TOL: f64 = 0.2;
const GRADIENT_REL_TOL: f64 = 1e-3;
const MASS_BALANCE_TOL: f64 = 1e-4;
const TWIN_OBJECTIVE_TOL: f64 = 1e-6;
const TWIN_SUP_TOL: f64 = 1e-3;
const BETA_FINAL: f64 = 1e-12;
const BETA_REL_TOL: f64 = 1e-15;
const DECOMPOSITION_REL_TOL: f64 = 1e-10;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn full_scale() -> bool {
    std::env::var("ADRFIT_ACCEPTANCE").is_ok_and(|v| v == "full")
}

/// `ADRFIT_ACCEPTANCE_ONLY=3,5` restricts the run to those criteria.
fn selected(id: usize) -> bool {
    match std::env::var("ADRFIT_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn check(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String), String>) -> Option<Line> {
    if !selected(id) {
        return None;
    }
    let t = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let line = Line {
        id,
        name,
        pass,
        detail: format!("{detail} [{:.1} s]", t.elapsed().as_secs_f64()),
    };
    println!(
        "{} {:>2} {}: {}",
        if line.pass { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail
    );
    Some(line)
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// L² error of the DG solution of the steady manufactured problem
/// `v u' − D u'' = S`, `u = 1 + sin(πz/2)` on `[0, 1]`.
fn manufactured_error(elements: usize, order: usize) -> Result<f64, String> {
    let (length, v, d) = (1.0, 1.0, 0.1);
    let k = PI / (2.0 * length);
    let u = |z: f64| 1.0 + (k * z).sin();
    let du = |z: f64| k * (k * z).cos();
    let d2u = |z: f64| -k * k * (k * z).sin();
    let components = ComponentSet::new([("c", Mobility::Mobile)]).map_err(err)?;
    let system = AdrSystem {
        length,
        transport: TransportCoefficients::uniform(&components, v, d),
        components,
        kinetics: StoichiometricKinetics::none(1),
        inlet: InletProgram::constant(vec![u(0.0) - d / v * du(0.0)]).map_err(err)?,
        initial: InitialProfile::Uniform(vec![0.0]),
    };
    let sd = semidiscretize(system, build_mesh(length, elements, order).map_err(err)?).map_err(err)?;
    let n = sd.n_states();
    let mut g = vec![0.0; n];
    sd.transport_rhs(0.0, &vec![0.0; n], &mut g);
    let z = sd.mesh().coordinates();
    let rhs = DVector::from_iterator(n, (0..n).map(|i| -(g[i] + v * du(z[i]) - d * d2u(z[i]))));
    let a: DMatrix<f64> = sd.transport_matrix(0).ok_or("no transport matrix")?.clone();
    let uh = a.lu().solve(&rhs).ok_or("singular transport matrix")?;
    let (qr, qw) = gauss_legendre(order + 4);
    let h = sd.mesh().element_width();
    let mut err2 = 0.0;
    for e in 0..elements {
        let z0 = sd.mesh().boundaries[e];
        for (r, w) in qr.iter().zip(&qw) {
            let zq = z0 + 0.5 * h * (r + 1.0);
            let diff = sd.evaluate_at(uh.as_slice(), 0, zq) - u(zq);
            err2 += 0.5 * h * w * diff * diff;
        }
    }
    Ok(err2.sqrt())
}

fn criterion_dg() -> Result<(bool, String), String> {
    let errs = [4, 8, 16].iter().map(|&ne| manufactured_error(ne, 3)).collect::<Result<Vec<_>, _>>()?;
    let rates: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min >= DG_MIN_ORDER, format!("p=3, L2 errors {}, observed orders {rates:.3?} (need >= {DG_MIN_ORDER})", sci(&errs))))
}

fn criterion_esdirk() -> Result<(bool, String), String> {
    let sys = FnSystem::new(
        1,
        |t, x: &[f64], out: &mut [f64]| out[0] = -x[0] * x[0] + t.sin(),
        |_t, x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -2.0 * x[0],
    );
    let solve = |h: f64| -> Result<f64, String> {
        let cfg = IntegratorConfig {
            fixed_step: Some(h),
            newton_tol: 1e-6,
            ..IntegratorConfig::with_tolerances(1e-10, 1e-12)
        };
        Ok(integrate(&sys, &[1.0], (0.0, 2.0), &cfg).map_err(err)?.final_state[0])
    };
    let x = (0..4).map(|k| solve(0.1 / 2f64.powi(k))).collect::<Result<Vec<_>, _>>()?;
    let slopes: Vec<f64> = (0..2).map(|k| ((x[k] - x[k + 1]) / (x[k + 1] - x[k + 2])).abs().log2()).collect();
    let ok = slopes.iter().all(|s| (s - ESDIRK_ORDER).abs() <= ESDIRK_ORDER_TOL);
    Ok((ok, format!("x' = -x^2 + sin t, h = 0.1/2^k, Richardson slopes {slopes:.4?}")))
}

fn twin_problem(noise: f64, settings: SolverSettings, seed: u64) -> Result<CalibrationProblem, String> {
    let column = ColumnConfig::default();
    let plan = SamplingPlan {
        noise_relative: noise,
        ..SamplingPlan::default()
    };
    let truth = SmaParameters::ground_truth().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exps = ProcessProgram::reference_experiments()[..3]
        .iter()
        .enumerate()
        .map(|(i, prog)| {
            synthesize_experiment(&format!("exp{}", i + 1), &column, &UvModel::default(), prog, &truth, &settings, &plan, &mut rng)
                .map_err(err)
        })
        .collect::<Result<Vec<_>, _>>()?;
    CalibrationProblem::new(column, UvModel::default(), ParameterSpace::sma_default(), exps, settings).map_err(err)
}

/// Random scaled points whose simulations succeed.
fn feasible_points(pb: &CalibrationProblem, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let s: Vec<f64> = (0..pb.dim()).map(|_| rng.random::<f64>()).collect();
        if !pb.evaluate(&s).failed {
            out.push(s);
        }
    }
    out
}

fn criterion_gradient() -> Result<(bool, String), String> {
    // The 1e-10 absolute tolerance is read in feed-scaled units: protein
    // concentrations are ~1e-5 mol/L, so 1e-10 relative to the 1e-4 mol/L
    // feed scale is 1e-14 mol/L. An unscaled 1e-10 mol/L leaves roughly 1e-4
    // relative integration noise in the objective, which swamps the central
    // difference at points with small gradients.
    let settings = SolverSettings {
        rtol: 1e-8,
        atol: 1e-14,
        ..SolverSettings::default()
    };
    let pb = twin_problem(0.01, settings, 3)?;
    let h = 1e-4;
    let mut worst = 0.0f64;
    for s in feasible_points(&pb, 5, 17) {
        let (_, g, _) = pb.objective_gradient_and_gn(&s).map_err(err)?;
        let mut fd = vec![0.0; s.len()];
        for (k, d) in fd.iter_mut().enumerate() {
            let mut a = s.clone();
            let mut b = s.clone();
            a[k] += h;
            b[k] -= h;
            *d = (pb.objective(&a) - pb.objective(&b)) / (2.0 * h);
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let e = g.iter().zip(&fd).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
        worst = worst.max(e);
    }
    Ok((
        worst <= GRADIENT_REL_TOL,
        format!("5 random points, tol 1e-8/1e-14 mol/L, central FD h={h}: max |g - g_fd|_inf / |g_fd|_inf = {worst:.2e}"),
    ))
}

fn criterion_mass_balance() -> Result<(bool, String), String> {
    let column = ColumnConfig::default();
    let prog = ProcessProgram::reference_experiments()[0];
    let sd = chromatography_semidiscrete(&column, &prog, Discretization::default()).map_err(err)?;
    let settings = SolverSettings {
        rtol: 1e-6,
        ..SolverSettings::default()
    };
    let res = protein_mass_balance(&sd, &column, &SmaParameters::ground_truth().to_vec(), prog.duration_s(&column), &settings)
        .map_err(err)?;
    let worst = res.iter().copied().fold(0.0f64, f64::max);
    Ok((worst <= MASS_BALANCE_TOL, format!("Exp 1, rtol 1e-6: relative residuals A1/A2/M {}", sci(&res))))
}

/// Default configuration rooted in `dir`.
fn campaign_config(dir: &Path, noise: f64) -> RunConfig {
    let mut cfg = RunConfig::from_toml(DEFAULT_CONFIG).expect("shipped config parses");
    cfg.paths.data_dir = dir.join("data");
    cfg.paths.output_dir = dir.join("results");
    cfg.sampling.noise_relative = noise;
    cfg
}

/// Budget of criteria 5 and 6 below desk scale: fewer evaluations and a
/// deterministic iteration cap on refinements.
fn reduce(cfg: &mut RunConfig, search: u64, refinements: usize) {
    cfg.optimizer.population = 20;
    cfg.budget.evaluations = search;
    cfg.budget.refinements = refinements;
    cfg.hybrid.outer_iterations = refinements.max(1);
    cfg.refiner.time_limit_s = None;
    cfg.refiner.max_iterations = 15;
    cfg.budget.evaluations_per_refinement = 15 * 2;
}

fn criterion_twin() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = campaign_config(dir.path(), 0.0);
    let scale = if full_scale() {
        "desk budget 4000 + 5x60 s".to_string()
    } else {
        reduce(&mut cfg, 400, 3);
        "reduced budget 400 + 3x15 iterations".to_string()
    };
    cmd_generate(&cfg, &cfg.paths.data_dir).map_err(err)?;
    let out = cmd_estimate(&cfg, &cfg.paths.output_dir).map_err(err)?;
    let report = cmd_validate(&cfg, &out.files[0], &cfg.paths.output_dir).map_err(err)?;
    let sup = report.experiments[0].outlet_sup_rel_error.as_ref().ok_or("no ground truth for validation")?;
    let worst = sup.components.iter().map(|c| c.objective).fold(sup.uv, f64::max);
    let phi = out.bundle.objective;
    Ok((
        phi <= TWIN_OBJECTIVE_TOL && worst <= TWIN_SUP_TOL,
        format!(
            "{scale}: objective {phi:.3e} (need <= {TWIN_OBJECTIVE_TOL:e}), step-validation sup error {worst:.3e} (need <= {TWIN_SUP_TOL:e})"
        ),
    ))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_ordering() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut base = campaign_config(dir.path(), 0.01);
    let scale = if full_scale() {
        "desk budget"
    } else {
        reduce(&mut base, 200, 2);
        base.solver.rtol = 1e-5;
        base.solver.atol = 1e-11;
        "reduced budget 200 + 2x15 iterations, rtol 1e-5"
    };
    cmd_generate(&base, &base.paths.data_dir).map_err(err)?;
    let methods = [Method::HybridEcaPassive, Method::Eca, Method::Multistart];
    let mut best = vec![Vec::new(); methods.len()];
    for seed in 1..=5u64 {
        for (m, method) in methods.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.optimizer.method = *method;
            let out = cmd_estimate(&cfg, &cfg.paths.output_dir).map_err(err)?;
            best[m].push(out.bundle.objective);
        }
    }
    let wins = best[0].iter().zip(&best[2]).filter(|(h, m)| h < m).count();
    let med: Vec<f64> = best.iter().map(|b| median(&mut b.clone())).collect();
    let ok = med[0] <= med[1] && med[1] <= med[2] && wins >= 4;
    Ok((
        ok,
        format!(
            "{scale}: medians hybrid {:.4e}, eca {:.4e}, multistart {:.4e}; hybrid < multistart in {wins}/5 seeds",
            med[0], med[1], med[2]
        ),
    ))
}

fn criterion_beta() -> Result<(bool, String), String> {
    let mut worst = 0.0f64;
    for n in 1..=30 {
        let rho = decay_for(n, 0.1, BETA_FINAL);
        let final_dist = beta_after(1.0, rho, n) * 0.1;
        worst = worst.max((final_dist - BETA_FINAL).abs() / BETA_FINAL);
    }
    Ok((worst <= BETA_REL_TOL, format!("n_outer 1..30: max relative deviation of final beta*Delta from 1e-12 = {worst:.2e}")))
}

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

fn worked_examples() -> Vec<&'static str> {
    let mut failed = Vec::new();
    let mut expect = |ok: bool, name: &'static str| {
        if !ok {
            failed.push(name);
        }
    };
    let a = [0.1, 0.2, 0.3, 0.4];
    let b = [0.3, 0.4, 0.5, 0.6];
    expect(normalized_distance(&a, &b).is_ok_and(|d| (d - 0.2).abs() < 1e-15), "distance 0.2");
    expect(normalized_distance(&a, &a).is_ok_and(|d| d == 0.0), "distance a=b");
    expect(normalized_distance(&[0.75], &[0.25]).is_ok_and(|d| d == 0.5), "distance n_p=1");
    expect(diversity_filter(&[0.5], &[], 1.0, 0.1), "diversity empty archive");
    expect(diversity_filter(&[0.75], &[vec![0.5]], 0.5, 0.5), "diversity boundary inclusive");
    expect(!diversity_filter(&[0.55], &[vec![0.5]], 1.0, 0.1), "diversity 0.05 fails");
    expect(proximity_filter(&[0.5], &[], 1.0), "proximity no records");
    expect(proximity_filter(&[0.5], &[record(vec![0.5], 0.0)], 1.0), "proximity zero radius");
    expect(!proximity_filter(&[0.6], &[record(vec![0.5], 0.3)], 1.0), "proximity inside basin");
    let mut pop = Population {
        individuals: [0.9, 1.1, 2.0].iter().enumerate().map(|(i, &v)| Individual::new(vec![i as f64 / 4.0], vec![v])).collect(),
        generation: 0,
        rng: ChaCha8Rng::seed_from_u64(0),
    };
    let mut refined = record(vec![0.33], 0.1);
    refined.objective = 1.0;
    let before = pop.fingerprint();
    expect(matches!(replace(&mut pop, &refined, RefinementStrategy::Passive, false), Ok(None)), "passive replacement");
    expect(pop.fingerprint() == before, "passive population unchanged");
    expect(matches!(replace(&mut pop, &refined, RefinementStrategy::Active, false), Ok(Some(1))), "active replaces 1.1");
    failed
}

/// Multimodal least-squares test problem on `[0, 1]^4`.
fn bumpy() -> (FnObjective<'static>, FnLeastSquares<'static>) {
    let r = |x: &[f64]| -> Vec<f64> {
        x.iter().flat_map(|&v| [v - 0.3, 0.3 * (6.0 * PI * v).sin()]).collect()
    };
    let j = |x: &[f64]| {
        let mut m = DMatrix::zeros(8, 4);
        for (i, &v) in x.iter().enumerate() {
            m[(2 * i, i)] = 1.0;
            m[(2 * i + 1, i)] = 1.8 * PI * (6.0 * PI * v).cos();
        }
        m
    };
    let obj = FnObjective::scalar(4, move |x| 0.5 * r(x).iter().map(|v| v * v).sum::<f64>());
    (obj, FnLeastSquares::new(4, r, j))
}

fn criterion_filters() -> Result<(bool, String), String> {
    let failed = worked_examples();
    let (obj, ls) = bumpy();
    let mut violations = 0;
    let mut records = 0;
    for seed in 0..4 {
        for strategy in [RefinementStrategy::Passive, RefinementStrategy::Active] {
            let cfg = HybridConfig::new(MetaheuristicConfig::Eca(EcaConfig::new(20)), strategy, 6, 3, 1200);
            let mut budget = EvaluationBudget::new(1200);
            let res = run_hybrid(&cfg, &obj, &ls, seed, &mut budget).map_err(err)?;
            records += res.records.len();
            violations += replay_filters(&res, &cfg).len();
        }
    }
    Ok((
        failed.is_empty() && violations == 0 && records > 0,
        format!("worked examples failed: {failed:?}; replay of 8 hybrid runs ({records} refinements): {violations} violations"),
    ))
}

fn criterion_decomposition() -> Result<(bool, String), String> {
    let pb = twin_problem(0.01, SolverSettings::default(), 5)?;
    let mut worst = 0.0f64;
    for s in feasible_points(&pb, 20, 23) {
        let e = pb.evaluate(&s);
        let by_e: f64 = e.by_experiment.iter().sum();
        let by_m: f64 = e.by_measurement.iter().sum();
        worst = worst.max((by_e - e.objective).abs() / e.objective);
        worst = worst.max((by_m - e.objective).abs() / e.objective);
    }
    Ok((worst <= DECOMPOSITION_REL_TOL, format!("20 random points: max relative mismatch {worst:.2e}")))
}

fn criterion_determinism() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = campaign_config(dir.path(), 0.01);
    reduce(&mut cfg, 100, 2);
    cfg.refiner.max_iterations = 3;
    cmd_generate(&cfg, &cfg.paths.data_dir).map_err(err)?;
    let a = cmd_estimate(&cfg, &dir.path().join("a")).map_err(err)?;
    let b = cmd_estimate(&cfg, &dir.path().join("b")).map_err(err)?;
    let (x, y) = (std::fs::read(&a.files[0]).map_err(err)?, std::fs::read(&b.files[0]).map_err(err)?);
    Ok((x == y, format!("hybrid-eca-passive twice, seed {}: bundles {} ({} bytes)", cfg.seed, if x == y { "identical" } else { "differ" }, x.len())))
}

fn main() {
    let t = Instant::now();
    let lines = [
        check(1, "DG spatial convergence", criterion_dg),
        check(2, "ESDIRK temporal order", criterion_esdirk),
        check(3, "sensitivity gradient", criterion_gradient),
        check(4, "mass balance", criterion_mass_balance),
        check(5, "twin-experiment recovery", criterion_twin),
        check(6, "hybrid vs multi-start ordering", criterion_ordering),
        check(7, "beta schedule", criterion_beta),
        check(8, "filter suite", criterion_filters),
        check(9, "decomposition consistency", criterion_decomposition),
        check(10, "determinism", criterion_determinism),
    ];
    let run: Vec<&Line> = lines.iter().flatten().collect();
    let passed = run.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria pass in {:.0} s", run.len(), t.elapsed().as_secs_f64());
}
