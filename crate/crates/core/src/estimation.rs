//! Multi-experiment weighted least squares: parameter scaling, measurement
//! data, residuals, analytic Jacobians from forward sensitivities, and the
//! experiment- and measurement-based objective decompositions.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chroma::{
    chromatography_semidiscrete, ColumnConfig, Discretization, FractionSchedule, ProcessProgram,
    SmaParameters, UvModel, N_PROTEINS,
};
use crate::dg::SemiDiscreteSystem;
use crate::error::{Error, Result};
use crate::optimizers::{LeastSquares, Objective};
use crate::esdirk::{
    attach_quadratures, integrate, integrate_with_sensitivities, IntegratorConfig, OdeSystem,
};

/// Objective value reported for parameters whose simulation fails.
pub const FAILURE_OBJECTIVE: f64 = 1e10;

/// Box of physical parameters with a logarithmic map onto `[0, 1]ⁿ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterSpace {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if names.len() != lower.len() || names.len() != upper.len() || names.is_empty() {
            return Err(Error::invalid("parameter names and bounds must have equal nonzero length"));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(*l > 0.0 && u > l && u.is_finite()) {
                return Err(Error::invalid(format!(
                    "bounds of {} must satisfy 0 < lower < upper, got [{l}, {u}]",
                    names[i]
                )));
            }
        }
        Ok(Self { names, lower, upper })
    }

    /// Default SMA box: k_kin ∈ [1e-2, 1e2], k_eq ∈ [1e-4, 1e2],
    /// charge ∈ [0.5, 20], σ ∈ [1, 1e2].
    pub fn sma_default() -> Self {
        let groups = [(1e-2, 1e2), (1e-4, 1e2), (0.5, 20.0), (1.0, 1e2)];
        let lower = groups.iter().flat_map(|g| [g.0; N_PROTEINS]).collect();
        let upper = groups.iter().flat_map(|g| [g.1; N_PROTEINS]).collect();
        Self::new(SmaParameters::names(), lower, upper).expect("default bounds are valid")
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// `(ln p − ln p̲)/(ln p̄ − ln p̲)`.
    pub fn scale(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(p)?;
        p.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (l, u) = (self.lower[i], self.upper[i]);
                if !(v >= l * (1.0 - 1e-12) && v <= u * (1.0 + 1e-12)) {
                    return Err(Error::invalid(format!(
                        "{} = {v} lies outside [{l}, {u}]",
                        self.names[i]
                    )));
                }
                Ok(((v.ln() - l.ln()) / (u.ln() - l.ln())).clamp(0.0, 1.0))
            })
            .collect()
    }

    /// Inverse of [`scale`](Self::scale); inputs are clamped to `[0, 1]`.
    pub fn unscale(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (l, u) = (self.lower[i].ln(), self.upper[i].ln());
                (l + v.clamp(0.0, 1.0) * (u - l)).exp()
            })
            .collect()
    }

    /// `dp_i/ds_i = p_i · ln(p̄_i/p̲_i)`.
    pub fn chain_factors(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(i, v)| v * (self.upper[i] / self.lower[i]).ln())
            .collect()
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.dim(),
                p.len()
            )));
        }
        Ok(())
    }
}

/// `1 / max ŷ` of a measurement series.
pub fn compute_weights(series: &[f64]) -> Result<f64> {
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if series.is_empty() || !(max > 0.0) || !max.is_finite() {
        return Err(Error::DegenerateData(
            "series must be nonempty with a positive maximum".into(),
        ));
    }
    Ok(1.0 / max)
}

/// Point measurements of outlet absorbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl UvSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() || times.is_empty() {
            return Err(Error::invalid("UV series needs matching nonempty times and values"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("UV times must be strictly ascending"));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) || times[0] < 0.0 {
            return Err(Error::invalid("UV series must be finite with nonnegative times"));
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Fraction measurements: `values[k][j]` is the average concentration of
/// protein `schedule.components()[j]` in vial `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionData {
    pub schedule: FractionSchedule,
    pub values: Vec<Vec<f64>>,
}

impl FractionData {
    pub fn new(schedule: FractionSchedule, values: Vec<Vec<f64>>) -> Result<Self> {
        let n_c = schedule.components().len();
        if values.len() != schedule.intervals().len() || values.iter().any(|v| v.len() != n_c) {
            return Err(Error::invalid("fraction values must be [interval][component]"));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("fraction values must be finite"));
        }
        Ok(Self { schedule, values })
    }

    /// Series of component slot `j` across all vials.
    pub fn component_series(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    pub program: ProcessProgram,
    pub uv: Option<UvSeries>,
    pub fractions: Option<FractionData>,
}

impl Experiment {
    pub fn uv_weight(&self) -> Result<Option<f64>> {
        self.uv.as_ref().map(|s| compute_weights(&s.values)).transpose()
    }

    /// One weight per observed fraction component.
    pub fn fraction_weights(&self) -> Result<Vec<f64>> {
        match &self.fractions {
            None => Ok(Vec::new()),
            Some(f) => (0..f.schedule.components().len())
                .map(|j| compute_weights(&f.component_series(j)))
                .collect(),
        }
    }

    /// Time span needed to cover the program and every measurement.
    pub fn horizon(&self, column: &ColumnConfig) -> f64 {
        let mut t = self.program.duration_s(column);
        if let Some(uv) = &self.uv {
            t = t.max(*uv.times.last().unwrap());
        }
        if let Some(f) = &self.fractions {
            if let Some(last) = f.schedule.intervals().last() {
                t = t.max(last.1);
            }
        }
        t
    }
}

/// Discretization and integrator settings shared by all simulations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub discretization: Discretization,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            discretization: Discretization::default(),
            rtol: 1e-6,
            atol: 1e-12,
        }
    }
}

/// Model predictions for one experiment; Jacobians are with respect to the
/// physical parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub uv: Vec<f64>,
    /// `[interval][component slot]`.
    pub fractions: Vec<Vec<f64>>,
    pub uv_jacobian: Option<DMatrix<f64>>,
    /// One `n_components × n_p` block per interval.
    pub fraction_jacobians: Option<Vec<DMatrix<f64>>>,
}

/// Outlet trajectory on an arbitrary time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OutletProfile {
    pub times: Vec<f64>,
    /// Mobile outlet concentrations `[salt, A1, A2, M]` per time.
    pub outlet: Vec<Vec<f64>>,
}

fn integrator_config(settings: &SolverSettings, sd: &SemiDiscreteSystem, outputs: Vec<f64>) -> IntegratorConfig {
    IntegratorConfig {
        output_times: outputs,
        stop_times: sd.system().inlet.breakpoints().to_vec(),
        ..IntegratorConfig::with_tolerances(settings.rtol, settings.atol)
    }
}

/// Simulates the outlet of `sd` at `times` (ascending, within `[0, t_end]`).
pub fn simulate_outlet(
    sd: &SemiDiscreteSystem,
    p: &[f64],
    times: &[f64],
    t_end: f64,
    settings: &SolverSettings,
) -> Result<OutletProfile> {
    let cfg = integrator_config(settings, sd, times.to_vec());
    let traj = integrate(&sd.with_params(p), &sd.initial_state(), (0.0, t_end), &cfg)?;
    let outlet = traj
        .states
        .iter()
        .map(|x| sd.evaluate_outlet(x))
        .collect::<Result<_>>()?;
    Ok(OutletProfile {
        times: traj.output_times,
        outlet,
    })
}

/// One integration of `sd` producing every prediction of `exp`.
pub fn simulate_experiment(
    sd: &SemiDiscreteSystem,
    column: &ColumnConfig,
    uv_model: &UvModel,
    exp: &Experiment,
    p: &[f64],
    settings: &SolverSettings,
    with_jacobian: bool,
) -> Result<Predictions> {
    let outlet_idx = sd.outlet_indices();
    let protein_idx: Vec<usize> = outlet_idx[1..1 + N_PROTEINS].to_vec();
    let aug = attach_quadratures(sd.with_params(p), protein_idx.clone());
    let quad_idx = [aug.quadrature_index(0), aug.quadrature_index(1), aug.quadrature_index(2)];

    let mut outputs: Vec<f64> = Vec::new();
    if let Some(uv) = &exp.uv {
        outputs.extend(&uv.times);
    }
    if let Some(f) = &exp.fractions {
        outputs.extend(f.schedule.endpoints());
    }
    outputs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    outputs.dedup();
    let t_end = exp.horizon(column);
    let cfg = integrator_config(settings, sd, outputs.clone());
    let x0 = aug.augment_initial(&sd.initial_state());

    let (states, sens) = if with_jacobian {
        let s0 = DMatrix::zeros(aug.dim(), sd.n_params());
        let (traj, st) = integrate_with_sensitivities(&aug, &x0, &s0, (0.0, t_end), &cfg)?;
        (traj.states, Some(st.sensitivities))
    } else {
        (integrate(&aug, &x0, (0.0, t_end), &cfg)?.states, None)
    };
    let slot = |t: f64| outputs.partition_point(|&s| s < t);

    let mut uv_pred = Vec::new();
    let mut uv_jac = None;
    if let Some(uv) = &exp.uv {
        let n_p = sd.n_params();
        let mut jac = DMatrix::zeros(uv.len(), n_p);
        for (k, &t) in uv.times.iter().enumerate() {
            let s = slot(t);
            let x = &states[s];
            let c: Vec<f64> = protein_idx.iter().map(|&i| x[i]).collect();
            uv_pred.push(uv_model.observe(&c));
            if let Some(sens) = &sens {
                for (j, &i) in protein_idx.iter().enumerate() {
                    for q in 0..n_p {
                        jac[(k, q)] += uv_model.gamma[j] * sens[s][(i, q)];
                    }
                }
            }
        }
        if sens.is_some() {
            uv_jac = Some(jac);
        }
    }

    let mut frac_pred = Vec::new();
    let mut frac_jac = sens.as_ref().map(|_| Vec::new());
    if let Some(f) = &exp.fractions {
        for &(a, b) in f.schedule.intervals() {
            let (sa, sb) = (slot(a), slot(b));
            let width = b - a;
            frac_pred.push(
                f.schedule
                    .components()
                    .iter()
                    .map(|&i| (states[sb][quad_idx[i]] - states[sa][quad_idx[i]]) / width)
                    .collect(),
            );
            if let (Some(sens), Some(out)) = (&sens, frac_jac.as_mut()) {
                let comps = f.schedule.components();
                let mut block = DMatrix::zeros(comps.len(), sd.n_params());
                for (j, &i) in comps.iter().enumerate() {
                    let row = (sens[sb].row(quad_idx[i]) - sens[sa].row(quad_idx[i])) / width;
                    block.row_mut(j).copy_from(&row);
                }
                out.push(block);
            }
        }
    }
    Ok(Predictions {
        uv: uv_pred,
        fractions: frac_pred,
        uv_jacobian: uv_jac,
        fraction_jacobians: frac_jac,
    })
}

/// Per-protein global balance over `[0, t_end]`: loaded minus eluted minus
/// held-up mass, relative to the loaded mass. All masses are per unit
/// mobile-phase cross section; `sd` must come from a process program.
pub fn protein_mass_balance(sd: &SemiDiscreteSystem, column: &ColumnConfig, p: &[f64], t_end: f64, settings: &SolverSettings) -> Result<[f64; N_PROTEINS]> {
    let v = column.velocity_mm_s;
    let phi = column.phase_ratio();
    let outlet_idx = sd.outlet_indices();
    let aug = attach_quadratures(sd.with_params(p), outlet_idx[1..1 + N_PROTEINS].to_vec());
    let cfg = integrator_config(settings, sd, Vec::new());
    let traj = integrate(&aug, &aug.augment_initial(&sd.initial_state()), (0.0, t_end), &cfg)?;
    let x = &traj.final_state;
    // The inlet is piecewise linear, so the trapezoidal rule is exact.
    let inlet = &sd.system().inlet;
    let mut bp: Vec<f64> = inlet.breakpoints().iter().copied().filter(|&t| t < t_end).collect();
    bp.push(t_end);
    let w = sd.mass_weights();
    let mut out = [0.0; N_PROTEINS];
    for (j, o) in out.iter_mut().enumerate() {
        let loaded: f64 = bp
            .windows(2)
            .map(|s| 0.5 * (s[1] - s[0]) * (inlet.evaluate(s[0])[1 + j] + inlet.evaluate(s[1])[1 + j]))
            .sum::<f64>()
            * v;
        let eluted = v * x[aug.quadrature_index(j)];
        let held: f64 = (0..sd.n_nodes())
            .map(|n| w[n] * (x[sd.index(1 + j, n)] + phi * x[sd.index(4 + j, n)]))
            .sum();
        *o = (loaded - eluted - held).abs() / loaded;
    }
    Ok(out)
}

/// Whether a residual stems from UV or from a fraction component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasurementKind {
    Uv,
    Fraction { component: usize },
}

/// Position of one residual in the stacked vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualIndex {
    pub experiment: usize,
    pub kind: MeasurementKind,
    /// Sample or interval index within its series.
    pub k: usize,
}

/// Objective value with both decompositions from one simulation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub by_experiment: Vec<f64>,
    pub by_measurement: Vec<f64>,
    pub failed: bool,
}

/// The calibration problem as seen by optimizers: everything is expressed in
/// scaled coordinates `s ∈ [0, 1]ⁿ`.
#[derive(Debug)]
pub struct CalibrationProblem {
    column: ColumnConfig,
    uv_model: UvModel,
    space: ParameterSpace,
    experiments: Vec<Experiment>,
    settings: SolverSettings,
    systems: Vec<SemiDiscreteSystem>,
    layout: Vec<ResidualIndex>,
    measurement_types: Vec<MeasurementKind>,
    evaluations: AtomicU64,
}

impl CalibrationProblem {
    pub fn new(
        column: ColumnConfig,
        uv_model: UvModel,
        space: ParameterSpace,
        experiments: Vec<Experiment>,
        settings: SolverSettings,
    ) -> Result<Self> {
        if experiments.is_empty() {
            return Err(Error::invalid("calibration needs at least one experiment"));
        }
        if space.dim() != crate::chroma::N_SMA_PARAMS {
            return Err(Error::invalid("parameter space must hold the 12 SMA parameters"));
        }
        let systems = experiments
            .iter()
            .map(|e| chromatography_semidiscrete(&column, &e.program, settings.discretization))
            .collect::<Result<Vec<_>>>()?;
        let mut layout = Vec::new();
        let mut has_uv = false;
        let mut fraction_components = [false; N_PROTEINS];
        for (e, exp) in experiments.iter().enumerate() {
            exp.uv_weight()?;
            exp.fraction_weights()?;
            if let Some(uv) = &exp.uv {
                has_uv = true;
                layout.extend((0..uv.len()).map(|k| ResidualIndex {
                    experiment: e,
                    kind: MeasurementKind::Uv,
                    k,
                }));
            }
            if let Some(f) = &exp.fractions {
                for k in 0..f.schedule.intervals().len() {
                    for &c in f.schedule.components() {
                        fraction_components[c] = true;
                        layout.push(ResidualIndex {
                            experiment: e,
                            kind: MeasurementKind::Fraction { component: c },
                            k,
                        });
                    }
                }
            }
        }
        let mut measurement_types = Vec::new();
        if has_uv {
            measurement_types.push(MeasurementKind::Uv);
        }
        for (c, present) in fraction_components.iter().enumerate() {
            if *present {
                measurement_types.push(MeasurementKind::Fraction { component: c });
            }
        }
        Ok(Self {
            column,
            uv_model,
            space,
            experiments,
            settings,
            systems,
            layout,
            measurement_types,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn column(&self) -> &ColumnConfig {
        &self.column
    }

    pub fn uv_model(&self) -> &UvModel {
        &self.uv_model
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn experiments(&self) -> &[Experiment] {
        &self.experiments
    }

    pub fn system(&self, experiment: usize) -> &SemiDiscreteSystem {
        &self.systems[experiment]
    }

    /// Index map of the stacked residual vector.
    pub fn residual_layout(&self) -> &[ResidualIndex] {
        &self.layout
    }

    pub fn n_residuals(&self) -> usize {
        self.layout.len()
    }

    /// Measurement types of the measurement-based decomposition, in order.
    pub fn measurement_types(&self) -> &[MeasurementKind] {
        &self.measurement_types
    }

    /// Total objective and Jacobian evaluations charged so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn charge(&self, n: u64) {
        self.evaluations.fetch_add(n, Ordering::Relaxed);
    }

    /// Predictions of experiment `e` at scaled parameters `s`; not charged.
    pub fn predict(&self, e: usize, s: &[f64], with_jacobian: bool) -> Result<Predictions> {
        let p = self.space.unscale(s);
        simulate_experiment(
            &self.systems[e],
            &self.column,
            &self.uv_model,
            &self.experiments[e],
            &p,
            &self.settings,
            with_jacobian,
        )
    }

    fn experiment_residuals(&self, e: usize, pred: &Predictions, out: &mut Vec<f64>) -> Result<()> {
        let exp = &self.experiments[e];
        if let (Some(uv), Some(w)) = (&exp.uv, exp.uv_weight()?) {
            out.extend(pred.uv.iter().zip(&uv.values).map(|(y, d)| w * (y - d)));
        }
        if let Some(f) = &exp.fractions {
            let w = exp.fraction_weights()?;
            for (k, row) in f.values.iter().enumerate() {
                for (j, d) in row.iter().enumerate() {
                    out.push(w[j] * (pred.fractions[k][j] - d));
                }
            }
        }
        Ok(())
    }

    fn check_scaled(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dim() || s.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("scaled parameters must lie in [0, 1]"));
        }
        Ok(())
    }

    fn residuals_uncharged(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_scaled(s)?;
        let mut r = Vec::with_capacity(self.n_residuals());
        for e in 0..self.experiments.len() {
            let pred = self.predict(e, s, false)?;
            self.experiment_residuals(e, &pred, &mut r)?;
        }
        Ok(r)
    }

    /// Stacked weighted residuals; charged as one evaluation.
    pub fn residuals(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.charge(1);
        self.residuals_uncharged(s)
    }

    /// Residuals and their Jacobian in scaled coordinates; charged as one
    /// residual evaluation plus one Jacobian evaluation.
    pub fn residuals_and_jacobian(&self, s: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.charge(2);
        self.check_scaled(s)?;
        let p = self.space.unscale(s);
        let chain = self.space.chain_factors(&p);
        let n_p = self.dim();
        let mut r = Vec::with_capacity(self.n_residuals());
        let mut jac = DMatrix::zeros(self.n_residuals(), n_p);
        let mut row = 0;
        for (e, exp) in self.experiments.iter().enumerate() {
            let pred = self.predict(e, s, true)?;
            self.experiment_residuals(e, &pred, &mut r)?;
            if let (Some(w), Some(j)) = (exp.uv_weight()?, &pred.uv_jacobian) {
                for k in 0..j.nrows() {
                    for q in 0..n_p {
                        jac[(row, q)] = w * j[(k, q)] * chain[q];
                    }
                    row += 1;
                }
            }
            if let Some(blocks) = &pred.fraction_jacobians {
                let w = exp.fraction_weights()?;
                for block in blocks {
                    for (jj, wj) in w.iter().enumerate() {
                        for q in 0..n_p {
                            jac[(row, q)] = wj * block[(jj, q)] * chain[q];
                        }
                        row += 1;
                    }
                }
            }
        }
        debug_assert_eq!(row, self.n_residuals());
        Ok((r, jac))
    }

    /// Full evaluation with both decompositions; charged once. A failed
    /// simulation yields [`FAILURE_OBJECTIVE`] everywhere.
    pub fn evaluate(&self, s: &[f64]) -> Evaluation {
        self.charge(1);
        match self.residuals_uncharged(s) {
            Ok(r) => self.decompose(&r),
            Err(_) => Evaluation {
                objective: FAILURE_OBJECTIVE,
                by_experiment: vec![FAILURE_OBJECTIVE; self.experiments.len()],
                by_measurement: vec![FAILURE_OBJECTIVE; self.measurement_types.len()],
                failed: true,
            },
        }
    }

    /// Splits `½‖r‖²` by experiment and by measurement type.
    pub fn decompose(&self, r: &[f64]) -> Evaluation {
        let mut by_exp = vec![0.0; self.experiments.len()];
        let mut by_meas = vec![0.0; self.measurement_types.len()];
        let mut total = 0.0;
        for (idx, v) in self.layout.iter().zip(r) {
            let half_sq = 0.5 * v * v;
            total += half_sq;
            by_exp[idx.experiment] += half_sq;
            let m = self
                .measurement_types
                .iter()
                .position(|k| *k == idx.kind)
                .expect("kind registered");
            by_meas[m] += half_sq;
        }
        Evaluation {
            objective: total,
            by_experiment: by_exp,
            by_measurement: by_meas,
            failed: false,
        }
    }

    /// `φ(s) = ½‖r(s)‖²`.
    pub fn objective(&self, s: &[f64]) -> f64 {
        self.evaluate(s).objective
    }

    pub fn decompose_experiment(&self, s: &[f64]) -> Vec<f64> {
        self.evaluate(s).by_experiment
    }

    pub fn decompose_measurement(&self, s: &[f64]) -> Vec<f64> {
        self.evaluate(s).by_measurement
    }

    /// `(φ, Jᵀr, JᵀJ)` in scaled coordinates.
    pub fn objective_gradient_and_gn(&self, s: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (r, j) = self.residuals_and_jacobian(s)?;
        let rv = DVector::from_vec(r);
        let phi = 0.5 * rv.norm_squared();
        let jt = j.transpose();
        Ok((phi, &jt * &rv, &jt * &j))
    }
}

impl LeastSquares for CalibrationProblem {
    fn dim(&self) -> usize {
        CalibrationProblem::dim(self)
    }
    fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
        CalibrationProblem::residuals(self, x)
    }
    fn residuals_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        CalibrationProblem::residuals_and_jacobian(self, x)
    }
}

/// How the metaheuristic sees the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveForm {
    /// Scalar `φ`.
    Total,
    /// One objective per experiment.
    Experiment,
    /// One objective per measurement type.
    Measurement,
}

/// [`Objective`] view of a [`CalibrationProblem`].
#[derive(Debug, Clone, Copy)]
pub struct CalibrationObjective<'a> {
    pub problem: &'a CalibrationProblem,
    pub form: ObjectiveForm,
}

impl<'a> CalibrationObjective<'a> {
    pub fn new(problem: &'a CalibrationProblem, form: ObjectiveForm) -> Self {
        Self { problem, form }
    }
}

impl Objective for CalibrationObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }
    fn n_objectives(&self) -> usize {
        match self.form {
            ObjectiveForm::Total => 1,
            ObjectiveForm::Experiment => self.problem.experiments().len(),
            ObjectiveForm::Measurement => self.problem.measurement_types().len(),
        }
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let e = self.problem.evaluate(x);
        match self.form {
            ObjectiveForm::Total => vec![e.objective],
            ObjectiveForm::Experiment => e.by_experiment,
            ObjectiveForm::Measurement => e.by_measurement,
        }
    }
}

/// Trims leading and trailing spans below 0.5 % of the maximum, then keeps
/// `n` points spread uniformly by index.
pub fn subsample_uv(times: &[f64], values: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if times.is_empty() || times.len() != values.len() {
        return Err(Error::invalid("raw UV series must be nonempty with matching lengths"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.005 * max;
    let first = values.iter().position(|&v| v > threshold).unwrap_or(0);
    let last = values.iter().rposition(|&v| v > threshold).unwrap_or(values.len() - 1);
    let (t, v) = (&times[first..=last], &values[first..=last]);
    let m = t.len();
    if n >= m {
        return Ok((t.to_vec(), v.to_vec()));
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if n == 1 {
        return Ok((vec![t[0]], vec![v[0]]));
    }
    let idx: Vec<usize> = (0..n)
        .map(|k| ((k as f64) * (m - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    Ok((idx.iter().map(|&i| t[i]).collect(), idx.iter().map(|&i| v[i]).collect()))
}

/// Sampling plan of a synthetic experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Raw UV grid resolution before trimming and subsampling.
    pub raw_uv_points: usize,
    pub uv_points: usize,
    pub fractions_per_peak: usize,
    /// Additive Gaussian noise, standard deviation relative to each series max.
    pub noise_relative: f64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            raw_uv_points: 5000,
            uv_points: 100,
            fractions_per_peak: 15,
            noise_relative: 0.01,
        }
    }
}

/// Simulates a twin experiment at physical parameters `p`: 100 trimmed UV
/// points and one contiguous vial sequence spanning the elution window
/// (`fractions_per_peak` vials per protein), all proteins observed.
pub fn synthesize_experiment<R: Rng + ?Sized>(
    id: &str,
    column: &ColumnConfig,
    uv_model: &UvModel,
    program: &ProcessProgram,
    p: &[f64],
    settings: &SolverSettings,
    plan: &SamplingPlan,
    rng: &mut R,
) -> Result<Experiment> {
    let sd = chromatography_semidiscrete(column, program, settings.discretization)?;
    let t_end = program.duration_s(column);
    let n_raw = plan.raw_uv_points.max(2);
    let grid: Vec<f64> = (0..n_raw)
        .map(|k| (t_end * k as f64 / (n_raw - 1) as f64).min(t_end))
        .collect();
    let raw = simulate_outlet(&sd, p, &grid, t_end, settings)?;
    let uv_raw: Vec<f64> = raw.outlet.iter().map(|c| uv_model.observe(&c[1..4])).collect();
    if !(uv_raw.iter().copied().fold(0.0, f64::max) > 0.0) {
        return Err(Error::DegenerateData(format!("experiment {id} produces no UV signal")));
    }
    let (uv_times, _) = subsample_uv(&grid, &uv_raw, plan.uv_points)?;

    // Vials span the elution-phase window with signal above 1 % of its max.
    let t_wash = program.phase_ends_s(column)[1];
    let elution: Vec<(f64, f64)> = grid
        .iter()
        .zip(&uv_raw)
        .filter(|(t, _)| **t >= t_wash)
        .map(|(t, v)| (*t, *v))
        .collect();
    let peak = elution.iter().map(|e| e.1).fold(0.0, f64::max);
    let above: Vec<f64> = elution.iter().filter(|e| e.1 > 0.01 * peak).map(|e| e.0).collect();
    let schedule = match (above.first(), above.last()) {
        (Some(&a), Some(&b)) if b > a => {
            let n = (plan.fractions_per_peak * N_PROTEINS).max(1);
            FractionSchedule::contiguous(a, b, (b - a) / n as f64, (0..N_PROTEINS).collect())?
        }
        _ => return Err(Error::DegenerateData(format!("experiment {id} has no elution peak"))),
    };

    let template = Experiment {
        id: id.to_string(),
        program: *program,
        uv: Some(UvSeries::new(uv_times.clone(), vec![1.0; uv_times.len()])?),
        fractions: Some(FractionData::new(
            schedule.clone(),
            vec![vec![1.0; N_PROTEINS]; schedule.intervals().len()],
        )?),
    };
    let pred = simulate_experiment(&sd, column, uv_model, &template, p, settings, false)?;
    let mut uv_values = pred.uv;
    let mut frac_values = pred.fractions;
    if plan.noise_relative > 0.0 {
        let uv_sigma = plan.noise_relative * uv_values.iter().copied().fold(0.0, f64::max);
        let noise = Normal::new(0.0, uv_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut uv_values {
            *v += noise.sample(rng);
        }
        for j in 0..N_PROTEINS {
            let sigma = plan.noise_relative * frac_values.iter().map(|r| r[j]).fold(0.0, f64::max);
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            for row in &mut frac_values {
                row[j] += noise.sample(rng);
            }
        }
    }
    Ok(Experiment {
        uv: Some(UvSeries::new(uv_times, uv_values)?),
        fractions: Some(FractionData::new(schedule, frac_values)?),
        ..template
    })
}
