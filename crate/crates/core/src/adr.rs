//! Representation of one-dimensional semi-linear advection-diffusion-reaction
//! systems.
//!
//! A system tracks `n_C` component concentrations on `[0, L]`:
//!
//! ```text
//! ∂t c = -∂z N(c) + R(c),   N(c) = v ⊙ c - D ⊙ ∂z c,   R(c) = νᵀ r(c, p)
//! ```
//!
//! with Danckwerts closure `N(0) = v c_in(t)`, `N(L) = v c(L)`. Stationary
//! phases are ordinary components with zero velocity and zero diffusion.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mobility {
    Mobile,
    Stationary,
}

/// Ordered component names. The order fixes the state layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    names: Vec<String>,
    mobility: Vec<Mobility>,
}

impl ComponentSet {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, Mobility)>) -> Result<Self> {
        let (names, mobility): (Vec<String>, Vec<Mobility>) =
            entries.into_iter().map(|(n, m)| (n.into(), m)).unzip();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate component name `{n}`")));
            }
        }
        if !mobility.contains(&Mobility::Mobile) {
            return Err(Error::invalid("at least one mobile component is required"));
        }
        Ok(Self { names, mobility })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mobility(&self, i: usize) -> Mobility {
        self.mobility[i]
    }

    pub fn is_mobile(&self, i: usize) -> bool {
        self.mobility[i] == Mobility::Mobile
    }

    /// Component indices of the mobile components, in layout order.
    pub fn mobile_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_mobile(i)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Per-component velocity `[mm/s]` and diffusion coefficient `[mm²/s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportCoefficients {
    pub velocity: Vec<f64>,
    pub diffusion: Vec<f64>,
}

impl TransportCoefficients {
    /// Same `(v, D)` on every mobile component, zero on stationary ones.
    pub fn uniform(components: &ComponentSet, velocity: f64, diffusion: f64) -> Self {
        let (velocity, diffusion) = (0..components.len())
            .map(|i| {
                if components.is_mobile(i) {
                    (velocity, diffusion)
                } else {
                    (0.0, 0.0)
                }
            })
            .unzip();
        Self {
            velocity,
            diffusion,
        }
    }
}

/// Kinetic rate law `r(c, p)` together with its Jacobians.
///
/// Implementations must be pure; the same law is shared by concurrent
/// evaluations.
pub trait RateLaw: Send + Sync {
    fn n_rates(&self) -> usize;
    fn n_components(&self) -> usize;
    fn n_params(&self) -> usize;

    fn rates(&self, c: &[f64], p: &[f64], out: &mut [f64]) -> Result<()>;

    /// `∂r/∂c`, an `n_r × n_C` matrix written into `out`.
    fn rate_jac_c(&self, c: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<()>;

    /// `∂r/∂p`, an `n_r × n_p` matrix written into `out`.
    fn rate_jac_p(&self, c: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<()>;
}

/// Rate law with no reactions.
#[derive(Debug, Clone, Copy)]
pub struct NoReaction {
    pub n_components: usize,
}

impl RateLaw for NoReaction {
    fn n_rates(&self) -> usize {
        0
    }
    fn n_components(&self) -> usize {
        self.n_components
    }
    fn n_params(&self) -> usize {
        0
    }
    fn rates(&self, _c: &[f64], _p: &[f64], _out: &mut [f64]) -> Result<()> {
        Ok(())
    }
    fn rate_jac_c(&self, _c: &[f64], _p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn rate_jac_p(&self, _c: &[f64], _p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// First-order rates `r_k = p_k · c_{species[k]}`; one parameter per rate.
#[derive(Debug, Clone)]
pub struct FirstOrderRates {
    pub n_components: usize,
    pub species: Vec<usize>,
}

impl RateLaw for FirstOrderRates {
    fn n_rates(&self) -> usize {
        self.species.len()
    }
    fn n_components(&self) -> usize {
        self.n_components
    }
    fn n_params(&self) -> usize {
        self.species.len()
    }
    fn rates(&self, c: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        for (k, &s) in self.species.iter().enumerate() {
            out[k] = p[k] * c[s];
        }
        Ok(())
    }
    fn rate_jac_c(&self, _c: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        for (k, &s) in self.species.iter().enumerate() {
            out[(k, s)] = p[k];
        }
        Ok(())
    }
    fn rate_jac_p(&self, c: &[f64], _p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        for (k, &s) in self.species.iter().enumerate() {
            out[(k, k)] = c[s];
        }
        Ok(())
    }
}

/// Reactions in stoichiometric form: `R(c) = νᵀ r(c, p)` with `ν` of size
/// `n_r × n_C`.
#[derive(Clone)]
pub struct StoichiometricKinetics {
    pub stoich: DMatrix<f64>,
    pub law: Arc<dyn RateLaw>,
}

impl fmt::Debug for StoichiometricKinetics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StoichiometricKinetics")
            .field("stoich", &self.stoich)
            .field("n_params", &self.law.n_params())
            .finish()
    }
}

impl StoichiometricKinetics {
    pub fn none(n_components: usize) -> Self {
        Self {
            stoich: DMatrix::zeros(0, n_components),
            law: Arc::new(NoReaction { n_components }),
        }
    }

    pub fn n_params(&self) -> usize {
        self.law.n_params()
    }
}

/// Piecewise-linear inlet concentrations for the mobile components, clamped
/// outside the breakpoint range.
#[derive(Debug, Clone, PartialEq)]
pub struct InletProgram {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl InletProgram {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(Error::invalid(
                "inlet program needs one value vector per breakpoint",
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("inlet breakpoints must be strictly ascending"));
        }
        let width = values[0].len();
        for v in &values {
            if v.len() != width {
                return Err(Error::invalid("inlet value vectors differ in length"));
            }
            if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::invalid("inlet concentrations must be finite and ≥ 0"));
            }
        }
        Ok(Self { breakpoints, values })
    }

    pub fn constant(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![0.0], vec![values])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values[0].len()
    }

    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.evaluate_into(t, &mut out);
        out
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) {
        let bp = &self.breakpoints;
        let last = bp.len() - 1;
        if t <= bp[0] {
            out.copy_from_slice(&self.values[0]);
            return;
        }
        if t >= bp[last] {
            out.copy_from_slice(&self.values[last]);
            return;
        }
        // First breakpoint strictly greater than t.
        let k = bp.partition_point(|&b| b <= t);
        let (t0, t1) = (bp[k - 1], bp[k]);
        let w = (t - t0) / (t1 - t0);
        for ((o, a), b) in out.iter_mut().zip(&self.values[k - 1]).zip(&self.values[k]) {
            *o = a + w * (b - a);
        }
    }
}

/// Initial concentration profile `c₀(z)` over all components.
#[derive(Clone)]
pub enum InitialProfile {
    Uniform(Vec<f64>),
    Function(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for InitialProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialProfile::Uniform(v) => f.debug_tuple("Uniform").field(v).finish(),
            InitialProfile::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl InitialProfile {
    pub fn at(&self, z: f64) -> Vec<f64> {
        match self {
            InitialProfile::Uniform(v) => v.clone(),
            InitialProfile::Function(f) => f(z),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdrSystem {
    pub length: f64,
    pub components: ComponentSet,
    pub transport: TransportCoefficients,
    pub kinetics: StoichiometricKinetics,
    pub inlet: InletProgram,
    pub initial: InitialProfile,
}

/// One violated invariant reported by [`validate_system`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveLength(f64),
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    NegativeDiffusion { component: usize },
    NegativeVelocity { component: usize },
    StationaryTransport { component: usize },
    NegativeInitial { z: f64, component: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveLength(l) => write!(f, "domain length {l} is not positive"),
            Violation::DimensionMismatch { what, expected, found } => {
                write!(f, "{what}: expected dimension {expected}, found {found}")
            }
            Violation::NegativeDiffusion { component } => {
                write!(f, "component {component} has negative diffusion")
            }
            Violation::NegativeVelocity { component } => {
                write!(f, "component {component} has negative velocity (outflow at z = 0 unsupported)")
            }
            Violation::StationaryTransport { component } => {
                write!(f, "stationary component {component} has nonzero transport")
            }
            Violation::NegativeInitial { z, component } => {
                write!(f, "initial profile of component {component} is negative at z = {z}")
            }
        }
    }
}

/// `v ⊙ c - D ⊙ ∂z c`.
pub fn flux(c: &[f64], dzc: &[f64], transport: &TransportCoefficients) -> Result<Vec<f64>> {
    let n = transport.velocity.len();
    if c.len() != n || dzc.len() != n || transport.diffusion.len() != n {
        return Err(Error::invalid("flux: vectors must all have length n_C"));
    }
    Ok((0..n)
        .map(|i| transport.velocity[i] * c[i] - transport.diffusion[i] * dzc[i])
        .collect())
}

/// Production vector `νᵀ r(c, p)`.
pub fn reaction(c: &[f64], p: &[f64], kinetics: &StoichiometricKinetics) -> Result<Vec<f64>> {
    let n_c = kinetics.stoich.ncols();
    if c.len() != n_c {
        return Err(Error::invalid(format!(
            "reaction: state has length {}, expected {n_c}",
            c.len()
        )));
    }
    let mut r = vec![0.0; kinetics.stoich.nrows()];
    kinetics.law.rates(c, p, &mut r)?;
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Simulation {
            t: f64::NAN,
            message: format!("non-finite reaction rates at state {c:?}"),
        });
    }
    let mut out = vec![0.0; n_c];
    for (k, rk) in r.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += kinetics.stoich[(k, i)] * rk;
        }
    }
    Ok(out)
}

/// Checks every structural invariant of `system`; an empty report means valid.
pub fn validate_system(system: &AdrSystem) -> Vec<Violation> {
    let mut report = Vec::new();
    let n = system.components.len();
    if !(system.length > 0.0) {
        report.push(Violation::NonPositiveLength(system.length));
    }
    let mut check = |what, found| {
        if found != n {
            report.push(Violation::DimensionMismatch {
                what,
                expected: n,
                found,
            });
        }
    };
    check("transport velocity", system.transport.velocity.len());
    check("transport diffusion", system.transport.diffusion.len());
    check("stoichiometric matrix columns", system.kinetics.stoich.ncols());
    check("rate law components", system.kinetics.law.n_components());
    let n_mobile = system.components.mobile_indices().len();
    if system.inlet.width() != n_mobile {
        report.push(Violation::DimensionMismatch {
            what: "inlet program",
            expected: n_mobile,
            found: system.inlet.width(),
        });
    }
    if system.kinetics.stoich.nrows() != system.kinetics.law.n_rates() {
        report.push(Violation::DimensionMismatch {
            what: "stoichiometric matrix rows",
            expected: system.kinetics.law.n_rates(),
            found: system.kinetics.stoich.nrows(),
        });
    }
    let t = &system.transport;
    if t.velocity.len() == n && t.diffusion.len() == n {
        for i in 0..n {
            if t.diffusion[i] < 0.0 {
                report.push(Violation::NegativeDiffusion { component: i });
            }
            if t.velocity[i] < 0.0 {
                report.push(Violation::NegativeVelocity { component: i });
            }
            if !system.components.is_mobile(i) && (t.velocity[i] != 0.0 || t.diffusion[i] != 0.0) {
                report.push(Violation::StationaryTransport { component: i });
            }
        }
    }
    if system.length > 0.0 {
        const PROBES: usize = 16;
        'probe: for k in 0..=PROBES {
            let z = system.length * k as f64 / PROBES as f64;
            let c0 = system.initial.at(z);
            if c0.len() != n {
                report.push(Violation::DimensionMismatch {
                    what: "initial profile",
                    expected: n,
                    found: c0.len(),
                });
                break;
            }
            for (i, &v) in c0.iter().enumerate() {
                if v < 0.0 {
                    report.push(Violation::NegativeInitial { z, component: i });
                    break 'probe;
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_component() -> TransportCoefficients {
        TransportCoefficients {
            velocity: vec![1.0],
            diffusion: vec![0.1],
        }
    }

    #[test]
    fn flux_examples() {
        assert!((flux(&[2.0], &[3.0], &one_component()).unwrap()[0] - 1.7).abs() < 1e-15);
        let still = TransportCoefficients {
            velocity: vec![0.0],
            diffusion: vec![0.0],
        };
        assert_eq!(flux(&[5.0], &[-4.0], &still).unwrap(), vec![0.0]);
        let column = TransportCoefficients {
            velocity: vec![0.7702],
            diffusion: vec![9.56e-2],
        };
        assert_eq!(flux(&[1.0], &[0.0], &column).unwrap(), vec![0.7702]);
    }

    #[test]
    fn flux_rejects_mismatched_lengths() {
        assert!(matches!(
            flux(&[1.0, 2.0], &[0.0], &one_component()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn reaction_is_stoich_transpose_times_rates() {
        struct Constant;
        impl RateLaw for Constant {
            fn n_rates(&self) -> usize {
                1
            }
            fn n_components(&self) -> usize {
                2
            }
            fn n_params(&self) -> usize {
                0
            }
            fn rates(&self, _c: &[f64], _p: &[f64], out: &mut [f64]) -> Result<()> {
                out[0] = 0.5;
                Ok(())
            }
            fn rate_jac_c(&self, _: &[f64], _: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
                out.fill(0.0);
                Ok(())
            }
            fn rate_jac_p(&self, _: &[f64], _: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
                out.fill(0.0);
                Ok(())
            }
        }
        let kin = StoichiometricKinetics {
            stoich: DMatrix::from_row_slice(1, 2, &[-2.0, 1.0]),
            law: Arc::new(Constant),
        };
        assert_eq!(reaction(&[0.3, 0.1], &[], &kin).unwrap(), vec![-1.0, 0.5]);
        let none = StoichiometricKinetics::none(3);
        assert_eq!(reaction(&[1.0, 2.0, 3.0], &[], &none).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn inlet_program_interpolates_and_clamps() {
        let inlet = InletProgram::new(vec![1.0, 3.0], vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(inlet.evaluate(0.0), vec![0.0, 2.0]);
        assert_eq!(inlet.evaluate(2.0), vec![0.5, 1.0]);
        assert_eq!(inlet.evaluate(10.0), vec![1.0, 0.0]);
        assert!(InletProgram::new(vec![1.0, 1.0], vec![vec![0.0], vec![0.0]]).is_err());
        assert!(InletProgram::new(vec![0.0], vec![vec![-1.0]]).is_err());
    }

    fn small_system() -> AdrSystem {
        let components =
            ComponentSet::new([("c", Mobility::Mobile), ("q", Mobility::Stationary)]).unwrap();
        let transport = TransportCoefficients::uniform(&components, 1.0, 0.1);
        AdrSystem {
            length: 1.0,
            transport,
            kinetics: StoichiometricKinetics::none(2),
            inlet: InletProgram::constant(vec![1.0]).unwrap(),
            initial: InitialProfile::Uniform(vec![0.0, 0.0]),
            components,
        }
    }

    #[test]
    fn validation_reports() {
        assert!(validate_system(&small_system()).is_empty());

        let mut bad = small_system();
        bad.transport.velocity.pop();
        assert!(validate_system(&bad)
            .iter()
            .any(|v| matches!(v, Violation::DimensionMismatch { what: "transport velocity", .. })));

        let mut bad = small_system();
        bad.transport.diffusion[0] = -1.0;
        assert!(validate_system(&bad).contains(&Violation::NegativeDiffusion { component: 0 }));

        let mut bad = small_system();
        bad.transport.velocity[1] = 0.2;
        assert!(validate_system(&bad).contains(&Violation::StationaryTransport { component: 1 }));
    }

    #[test]
    fn component_set_invariants() {
        assert!(ComponentSet::new([("a", Mobility::Mobile), ("a", Mobility::Stationary)]).is_err());
        assert!(ComponentSet::new([("q", Mobility::Stationary)]).is_err());
    }
}
