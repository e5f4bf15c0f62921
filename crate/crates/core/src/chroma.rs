//! Bind-and-elute ion-exchange chromatography as an ADR system: column
//! configuration, steric mass action (SMA) kinetics, process programs and
//! the UV and fraction observation models.
//!
//! Tracked components, in state order:
//! `[salt, A1, A2, M, q_A1, q_A2, q_M]`. The bound salt is not tracked; it
//! follows from the closure `q_salt = Λ − Σ charge_j q_j`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adr::{
    AdrSystem, ComponentSet, InitialProfile, InletProgram, Mobility, RateLaw,
    StoichiometricKinetics, TransportCoefficients,
};
use crate::dg::{build_mesh, semidiscretize, SemiDiscreteSystem};
use crate::error::{Error, Result};
use crate::esdirk::Trajectory;

pub const PROTEINS: [&str; 3] = ["A1", "A2", "M"];
pub const N_PROTEINS: usize = 3;
pub const N_SMA_PARAMS: usize = 12;
pub const COMPONENT_NAMES: [&str; 7] = ["salt", "A1", "A2", "M", "q_A1", "q_A2", "q_M"];
/// Duration of the linear ramp that replaces every inlet discontinuity [s].
pub const SWITCH_RAMP_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnConfig {
    pub length_mm: f64,
    pub volume_mm3: f64,
    pub porosity: f64,
    pub velocity_mm_s: f64,
    pub diffusion_mm2_s: f64,
    pub ionic_capacity_mol_l: f64,
}

impl Default for ColumnConfig {
    fn default() -> Self {
        Self {
            length_mm: 192.0,
            volume_mm3: 1.5072e4,
            porosity: 0.831,
            velocity_mm_s: 0.7702,
            diffusion_mm2_s: 9.56e-2,
            ionic_capacity_mol_l: 0.64,
        }
    }
}

impl ColumnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length_mm),
            ("volume", self.volume_mm3),
            ("velocity", self.velocity_mm_s),
            ("diffusion", self.diffusion_mm2_s),
            ("ionic capacity", self.ionic_capacity_mol_l),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("column {name} must be positive, got {v}")));
            }
        }
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(Error::invalid(format!(
                "porosity must lie in (0, 1), got {}",
                self.porosity
            )));
        }
        Ok(())
    }

    /// `φ = (1 − ε)/ε`.
    pub fn phase_ratio(&self) -> f64 {
        (1.0 - self.porosity) / self.porosity
    }

    /// Duration of one column volume, `L/(v·ε)` [s].
    pub fn column_volume_time_s(&self) -> f64 {
        self.length_mm / (self.velocity_mm_s * self.porosity)
    }

    pub fn cross_section_mm2(&self) -> f64 {
        self.volume_mm3 / self.length_mm
    }
}

/// The twelve SMA parameters, ordered `[k_kin; k_eq; charge; sigma]` per
/// protein `(A1, A2, M)` when flattened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmaParameters {
    pub k_kin: [f64; 3],
    pub k_eq: [f64; 3],
    pub charge: [f64; 3],
    pub sigma: [f64; 3],
}

impl SmaParameters {
    /// Synthetic ground truth used for twin experiments.
    pub fn ground_truth() -> Self {
        Self {
            k_kin: [0.02, 0.02, 0.02],
            k_eq: [0.03, 0.0275, 0.0188],
            charge: [3.0, 4.0, 5.0],
            sigma: [10.0, 20.0, 30.0],
        }
    }

    pub fn names() -> Vec<String> {
        ["k_kin", "k_eq", "charge", "sigma"]
            .iter()
            .flat_map(|g| PROTEINS.iter().map(move |p| format!("{g}_{p}")))
            .collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [self.k_kin, self.k_eq, self.charge, self.sigma].concat()
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        if p.len() != N_SMA_PARAMS {
            return Err(Error::invalid(format!(
                "expected {N_SMA_PARAMS} SMA parameters, got {}",
                p.len()
            )));
        }
        let take = |k: usize| [p[3 * k], p[3 * k + 1], p[3 * k + 2]];
        let out = Self {
            k_kin: take(0),
            k_eq: take(1),
            charge: take(2),
            sigma: take(3),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self
            .k_kin
            .iter()
            .chain(&self.k_eq)
            .chain(&self.sigma)
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.charge.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("SMA parameters must be positive (charges ≥ 0)"));
        }
        Ok(())
    }
}

/// Free binding capacity `Λ − Σ_j (charge_j + σ_j) q_j`.
fn free_capacity(q: &[f64], p: &[f64], lambda: f64) -> f64 {
    lambda
        - (0..N_PROTEINS)
            .map(|j| (p[6 + j] + p[9 + j]) * q[j])
            .sum::<f64>()
}

/// SMA adsorption rates `∂t q_i` for the three proteins.
pub fn sma_rates(
    c_protein: &[f64],
    q_protein: &[f64],
    c_salt: f64,
    params: &SmaParameters,
    lambda: f64,
) -> Result<[f64; 3]> {
    let p = params.to_vec();
    let f = free_capacity(q_protein, &p, lambda);
    check_domain(f, c_salt, c_protein, q_protein)?;
    let mut r = [0.0; 3];
    for i in 0..N_PROTEINS {
        r[i] = protein_rate(i, c_protein[i], q_protein[i], c_salt, f, &p);
    }
    Ok(r)
}

fn protein_rate(i: usize, c: f64, q: f64, cs: f64, f: f64, p: &[f64]) -> f64 {
    let (k_kin, k_eq, nu) = (p[i], p[3 + i], p[6 + i]);
    (k_eq * f.powf(nu) * c - q * cs.powf(nu)) / k_kin
}

fn check_domain(f: f64, cs: f64, c: &[f64], q: &[f64]) -> Result<()> {
    if !(f > 0.0) || !(cs > 0.0) {
        let mut state = vec![cs];
        state.extend_from_slice(c);
        state.extend_from_slice(q);
        return Err(Error::kinetics(
            format!("SMA outside its domain (free capacity {f:e}, salt {cs:e})"),
            &state,
        ));
    }
    Ok(())
}

/// Bound salt from the closure `Λ − Σ_j charge_j q_j`.
pub fn salt_stationary(q_protein: &[f64], params: &SmaParameters, lambda: f64) -> f64 {
    lambda
        - params
            .charge
            .iter()
            .zip(q_protein)
            .map(|(nu, q)| nu * q)
            .sum::<f64>()
}

/// SMA rate law over the seven tracked components. Rates are
/// `[∂t q_salt, ∂t q_A1, ∂t q_A2, ∂t q_M]`; parameters are the flattened
/// [`SmaParameters`].
#[derive(Debug, Clone, Copy)]
pub struct SmaKinetics {
    pub lambda: f64,
}

impl RateLaw for SmaKinetics {
    fn n_rates(&self) -> usize {
        1 + N_PROTEINS
    }
    fn n_components(&self) -> usize {
        COMPONENT_NAMES.len()
    }
    fn n_params(&self) -> usize {
        N_SMA_PARAMS
    }

    fn rates(&self, c: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let cs = c[0];
        let f = free_capacity(&c[4..7], p, self.lambda);
        check_domain(f, cs, &c[1..4], &c[4..7])?;
        out[0] = 0.0;
        for j in 0..N_PROTEINS {
            let r = protein_rate(j, c[1 + j], c[4 + j], cs, f, p);
            out[1 + j] = r;
            out[0] -= p[6 + j] * r;
        }
        Ok(())
    }

    fn rate_jac_c(&self, c: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        let cs = c[0];
        let f = free_capacity(&c[4..7], p, self.lambda);
        check_domain(f, cs, &c[1..4], &c[4..7])?;
        out.fill(0.0);
        for j in 0..N_PROTEINS {
            let (k_kin, k_eq, nu) = (p[j], p[3 + j], p[6 + j]);
            let (cj, qj) = (c[1 + j], c[4 + j]);
            let row = 1 + j;
            out[(row, 0)] = -qj * nu * cs.powf(nu - 1.0) / k_kin;
            out[(row, 1 + j)] = k_eq * f.powf(nu) / k_kin;
            let dfq = k_eq * nu * f.powf(nu - 1.0) * cj / k_kin;
            for m in 0..N_PROTEINS {
                out[(row, 4 + m)] = -dfq * (p[6 + m] + p[9 + m]);
            }
            out[(row, 4 + j)] -= cs.powf(nu) / k_kin;
        }
        for col in 0..7 {
            out[(0, col)] = -(0..N_PROTEINS).map(|j| p[6 + j] * out[(1 + j, col)]).sum::<f64>();
        }
        Ok(())
    }

    fn rate_jac_p(&self, c: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        let cs = c[0];
        let f = free_capacity(&c[4..7], p, self.lambda);
        check_domain(f, cs, &c[1..4], &c[4..7])?;
        out.fill(0.0);
        let ln_f = f.ln();
        let ln_cs = cs.ln();
        let mut r = [0.0; 3];
        for j in 0..N_PROTEINS {
            let (k_kin, k_eq, nu) = (p[j], p[3 + j], p[6 + j]);
            let (cj, qj) = (c[1 + j], c[4 + j]);
            let row = 1 + j;
            let ads = k_eq * f.powf(nu) * cj;
            let des = qj * cs.powf(nu);
            r[j] = (ads - des) / k_kin;
            out[(row, j)] = -r[j] / k_kin;
            out[(row, 3 + j)] = f.powf(nu) * cj / k_kin;
            out[(row, 6 + j)] = (ads * ln_f - des * ln_cs) / k_kin;
            // Through the free capacity: ∂F/∂charge_m = ∂F/∂σ_m = −q_m.
            let dfq = k_eq * nu * f.powf(nu - 1.0) * cj / k_kin;
            for m in 0..N_PROTEINS {
                let dq = -dfq * c[4 + m];
                out[(row, 6 + m)] += dq;
                out[(row, 9 + m)] += dq;
            }
        }
        for col in 0..N_SMA_PARAMS {
            out[(0, col)] = -(0..N_PROTEINS).map(|j| p[6 + j] * out[(1 + j, col)]).sum::<f64>();
        }
        for j in 0..N_PROTEINS {
            out[(0, 6 + j)] -= r[j];
        }
        Ok(())
    }
}

/// Stoichiometry `ν` (rates × components): mobile phases lose `φ` per unit
/// stationary-phase gain.
pub fn sma_stoichiometry(phase_ratio: f64) -> DMatrix<f64> {
    let mut nu = DMatrix::zeros(1 + N_PROTEINS, COMPONENT_NAMES.len());
    nu[(0, 0)] = -phase_ratio;
    for j in 0..N_PROTEINS {
        nu[(1 + j, 1 + j)] = -phase_ratio;
        nu[(1 + j, 4 + j)] = 1.0;
    }
    nu
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ElutionShape {
    /// Linear change of the buffer-B fraction over the elution phase [%].
    Gradient { start_pct: f64, end_pct: f64 },
    /// Jump to a fixed buffer-B fraction at the start of elution [%].
    Step { pct: f64 },
}

/// Load, wash and elute phases, durations in column volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessProgram {
    pub load_cv: f64,
    pub wash_cv: f64,
    pub elute_cv: f64,
    pub elution: ElutionShape,
    pub buffer_a_salt_mol_l: f64,
    pub buffer_b_salt_mol_l: f64,
    pub feed_mol_l: [f64; 3],
}

impl ProcessProgram {
    pub const BUFFER_A_SALT: f64 = 0.05;
    pub const BUFFER_B_SALT: f64 = 0.55;
    pub const FEED: [f64; 3] = [2.895e-5, 1.558e-5, 6.750e-5];

    pub fn gradient(load_cv: f64, wash_cv: f64, elute_cv: f64, start_pct: f64, end_pct: f64) -> Self {
        Self {
            load_cv,
            wash_cv,
            elute_cv,
            elution: ElutionShape::Gradient { start_pct, end_pct },
            buffer_a_salt_mol_l: Self::BUFFER_A_SALT,
            buffer_b_salt_mol_l: Self::BUFFER_B_SALT,
            feed_mol_l: Self::FEED,
        }
    }

    pub fn step(load_cv: f64, wash_cv: f64, elute_cv: f64, pct: f64) -> Self {
        Self {
            elution: ElutionShape::Step { pct },
            ..Self::gradient(load_cv, wash_cv, elute_cv, 0.0, 0.0)
        }
    }

    /// The six programs of the reference study: five gradients
    /// (0→50 % B) used for calibration and one 25 % step for validation.
    pub fn reference_experiments() -> Vec<Self> {
        vec![
            Self::gradient(0.52, 2.0, 10.0, 0.0, 50.0),
            Self::gradient(0.52, 2.0, 15.0, 0.0, 50.0),
            Self::gradient(0.52, 2.0, 20.0, 0.0, 50.0),
            Self::gradient(1.56, 2.0, 10.0, 0.0, 50.0),
            Self::gradient(2.08, 2.0, 10.0, 0.0, 50.0),
            Self::step(0.52, 2.0, 5.0, 25.0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("load", self.load_cv), ("wash", self.wash_cv), ("elution", self.elute_cv)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} duration must be positive, got {v}")));
            }
        }
        let pct_ok = |x: f64| (0.0..=100.0).contains(&x);
        let ok = match self.elution {
            ElutionShape::Gradient { start_pct, end_pct } => pct_ok(start_pct) && pct_ok(end_pct),
            ElutionShape::Step { pct } => pct_ok(pct),
        };
        if !ok {
            return Err(Error::invalid("buffer-B fractions must lie in [0, 100] %"));
        }
        if !(self.buffer_a_salt_mol_l > 0.0) || !(self.buffer_b_salt_mol_l >= 0.0) {
            return Err(Error::invalid("buffer A salt must be positive and buffer B salt ≥ 0"));
        }
        if self.feed_mol_l.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::invalid("feed concentrations must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Salt concentration of the buffer mixture with `pct` % buffer B.
    pub fn salt_at(&self, pct: f64) -> f64 {
        let x = pct / 100.0;
        (1.0 - x) * self.buffer_a_salt_mol_l + x * self.buffer_b_salt_mol_l
    }

    /// Phase boundaries `[load end, wash end, elution end]` in seconds.
    pub fn phase_ends_s(&self, column: &ColumnConfig) -> [f64; 3] {
        let cv = column.column_volume_time_s();
        let t_load = self.load_cv * cv;
        let t_wash = t_load + self.wash_cv * cv;
        [t_load, t_wash, t_wash + self.elute_cv * cv]
    }

    pub fn duration_s(&self, column: &ColumnConfig) -> f64 {
        self.phase_ends_s(column)[2]
    }
}

/// Piecewise-linear inlet for `[salt, A1, A2, M]`. Every discontinuity is
/// replaced by a [`SWITCH_RAMP_S`] linear ramp starting at the nominal time.
pub fn build_inlet_program(program: &ProcessProgram, column: &ColumnConfig) -> Result<InletProgram> {
    program.validate()?;
    column.validate()?;
    let [t_load, t_wash, t_end] = program.phase_ends_s(column);
    let ramp = SWITCH_RAMP_S;
    if t_load <= ramp || t_wash - t_load <= ramp || t_end - t_wash <= ramp {
        return Err(Error::invalid("every process phase must outlast the switching ramp"));
    }
    let a = program.buffer_a_salt_mol_l;
    let feed = program.feed_mol_l;
    let row = |salt: f64, proteins: [f64; 3]| vec![salt, proteins[0], proteins[1], proteins[2]];
    let zero = [0.0; 3];
    let mut bp = vec![0.0, ramp, t_load, t_load + ramp, t_wash];
    let mut vals = vec![row(a, zero), row(a, feed), row(a, feed), row(a, zero), row(a, zero)];
    let (first, last) = match program.elution {
        ElutionShape::Gradient { start_pct, end_pct } => (program.salt_at(start_pct), program.salt_at(end_pct)),
        ElutionShape::Step { pct } => (program.salt_at(pct), program.salt_at(pct)),
    };
    if first != a {
        bp.push(t_wash + ramp);
        vals.push(row(first, zero));
    }
    bp.push(t_end);
    vals.push(row(last, zero));
    InletProgram::new(bp, vals)
}

/// Spatial discretization settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discretization {
    pub elements: usize,
    pub order: usize,
}

impl Default for Discretization {
    fn default() -> Self {
        Self { elements: 5, order: 3 }
    }
}

/// The chromatography ADR system for one process program. The column is
/// initially equilibrated with buffer A.
pub fn assemble_chromatography_system(
    column: &ColumnConfig,
    program: &ProcessProgram,
) -> Result<AdrSystem> {
    column.validate()?;
    let inlet = build_inlet_program(program, column)?;
    let components = ComponentSet::new(COMPONENT_NAMES.iter().enumerate().map(|(i, n)| {
        (
            *n,
            if i < 4 {
                Mobility::Mobile
            } else {
                Mobility::Stationary
            },
        )
    }))?;
    let transport = TransportCoefficients::uniform(&components, column.velocity_mm_s, column.diffusion_mm2_s);
    let kinetics = StoichiometricKinetics {
        stoich: sma_stoichiometry(column.phase_ratio()),
        law: Arc::new(SmaKinetics {
            lambda: column.ionic_capacity_mol_l,
        }),
    };
    let mut initial = vec![0.0; COMPONENT_NAMES.len()];
    initial[0] = program.buffer_a_salt_mol_l;
    Ok(AdrSystem {
        length: column.length_mm,
        components,
        transport,
        kinetics,
        inlet,
        initial: InitialProfile::Uniform(initial),
    })
}

/// Assembles and discretizes the chromatography system.
pub fn chromatography_semidiscrete(
    column: &ColumnConfig,
    program: &ProcessProgram,
    disc: Discretization,
) -> Result<SemiDiscreteSystem> {
    let system = assemble_chromatography_system(column, program)?;
    let mesh = build_mesh(column.length_mm, disc.elements, disc.order)?;
    semidiscretize(system, mesh)
}

/// Beer-Lambert UV model: absorbance `Σ_i γ_i c_i(t, L)` over proteins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvModel {
    pub gamma: [f64; 3],
}

impl Default for UvModel {
    fn default() -> Self {
        Self { gamma: [1.0; 3] }
    }
}

impl UvModel {
    pub fn new(gamma: [f64; 3]) -> Result<Self> {
        if gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::invalid("UV scaling factors must be positive"));
        }
        Ok(Self { gamma })
    }

    /// Absorbance from outlet protein concentrations `(A1, A2, M)`.
    pub fn observe(&self, c_protein: &[f64]) -> f64 {
        self.gamma.iter().zip(c_protein).map(|(g, c)| g * c).sum()
    }
}

/// Fraction-collection intervals and the observed proteins (indices into
/// `PROTEINS`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSchedule {
    intervals: Vec<(f64, f64)>,
    components: Vec<usize>,
}

impl FractionSchedule {
    pub fn new(intervals: Vec<(f64, f64)>, components: Vec<usize>) -> Result<Self> {
        for &(a, b) in &intervals {
            if !(b > a) {
                return Err(Error::invalid(format!("fraction interval [{a}, {b}] must have t_end > t_start")));
            }
        }
        if intervals.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::invalid("fraction intervals must be ascending and non-overlapping"));
        }
        if components.iter().any(|&c| c >= N_PROTEINS) {
            return Err(Error::invalid("fraction components must index proteins"));
        }
        Ok(Self { intervals, components })
    }

    /// Contiguous vials of equal width `width` covering `[start, end]`.
    pub fn contiguous(start: f64, end: f64, width: f64, components: Vec<usize>) -> Result<Self> {
        if !(width > 0.0) || !(end > start) {
            return Err(Error::invalid("contiguous fractions need end > start and width > 0"));
        }
        let n = ((end - start) / width).round().max(1.0) as usize;
        let w = (end - start) / n as f64;
        let intervals = (0..n).map(|k| (start + k as f64 * w, start + (k + 1) as f64 * w)).collect();
        Self::new(intervals, components)
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn components(&self) -> &[usize] {
        &self.components
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty() || self.components.is_empty()
    }

    /// All interval endpoints, ascending and deduplicated.
    pub fn endpoints(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.intervals.iter().flat_map(|&(a, b)| [a, b]).collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t.dedup();
        t
    }
}

/// Interval averages `(Q(t_end) − Q(t_start))/(t_end − t_start)` read from
/// quadrature states; `quadrature_index[i]` is the state index of the
/// quadrature of protein `i`. Result is `[interval][observed component]`.
pub fn fraction_observe(
    trajectory: &Trajectory,
    quadrature_index: &[usize; 3],
    schedule: &FractionSchedule,
) -> Result<Vec<Vec<f64>>> {
    schedule
        .intervals()
        .iter()
        .map(|&(a, b)| {
            let qa = trajectory.state_at(a).ok_or_else(|| missing_output(a))?;
            let qb = trajectory.state_at(b).ok_or_else(|| missing_output(b))?;
            Ok(schedule
                .components()
                .iter()
                .map(|&i| (qb[quadrature_index[i]] - qa[quadrature_index[i]]) / (b - a))
                .collect())
        })
        .collect()
}

fn missing_output(t: f64) -> Error {
    Error::Simulation {
        t,
        message: "fraction endpoint is not a mandatory output time".into(),
    }
}
