//! Adaptive TR-BDF2 integration with staggered-direct forward sensitivities.
//!
//! TR-BDF2 is written as a three-stage ESDIRK scheme (explicit first stage,
//! diagonal `d = 1 - √2/2` on the implicit stages, stiffly accurate) with the
//! third-order embedded weights of Hosea and Shampine. Implicit stages are
//! solved by modified Newton with the iteration matrix `I - h d J`.
//!
//! Sensitivities `S = ∂x/∂p` are advanced after every accepted state step by
//! applying the same scheme to `Ṡ = J S + ∂f/∂p`, with the exact Jacobian at
//! each converged stage. They never affect step-size control.

use nalgebra::{DMatrix, DVector, LU, Dyn};

use crate::error::{Error, Result};

/// A first-order ODE system `ẋ = f(t, x)` with parameters bound in.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn n_params(&self) -> usize {
        0
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// `∂f/∂x`, `dim × dim`.
    fn jac_x(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()>;

    /// `∂f/∂p`, `dim × n_params`.
    fn jac_p(&self, _t: f64, _x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

impl<T: OdeSystem + ?Sized> OdeSystem for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_params(&self) -> usize {
        (**self).n_params()
    }
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).rhs(t, x, out)
    }
    fn jac_x(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        (**self).jac_x(t, x, out)
    }
    fn jac_p(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        (**self).jac_p(t, x, out)
    }
}

/// Closure-backed system, handy for small problems.
pub struct FnSystem<F, J, P = fn(f64, &[f64], &mut DMatrix<f64>)> {
    pub dim: usize,
    pub n_params: usize,
    pub f: F,
    pub jac: J,
    pub jac_p: Option<P>,
}

impl<F, J> FnSystem<F, J>
where
    F: Fn(f64, &[f64], &mut [f64]),
    J: Fn(f64, &[f64], &mut DMatrix<f64>),
{
    pub fn new(dim: usize, f: F, jac: J) -> Self {
        Self {
            dim,
            n_params: 0,
            f,
            jac,
            jac_p: None,
        }
    }
}

impl<F, J, P> FnSystem<F, J, P>
where
    F: Fn(f64, &[f64], &mut [f64]),
    J: Fn(f64, &[f64], &mut DMatrix<f64>),
    P: Fn(f64, &[f64], &mut DMatrix<f64>),
{
    pub fn with_params(dim: usize, n_params: usize, f: F, jac: J, jac_p: P) -> Self {
        Self {
            dim,
            n_params,
            f,
            jac,
            jac_p: Some(jac_p),
        }
    }
}

impl<F, J, P> OdeSystem for FnSystem<F, J, P>
where
    F: Fn(f64, &[f64], &mut [f64]),
    J: Fn(f64, &[f64], &mut DMatrix<f64>),
    P: Fn(f64, &[f64], &mut DMatrix<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(t, x, out);
        Ok(())
    }
    fn jac_x(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        (self.jac)(t, x, out);
        Ok(())
    }
    fn jac_p(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        match &self.jac_p {
            Some(jp) => jp(t, x, out),
            None => out.fill(0.0),
        }
        Ok(())
    }
}

/// Three-stage ESDIRK tableau with an embedded error estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ButcherTableau {
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub b_hat: [f64; 3],
    pub c: [f64; 3],
    /// Diagonal of the implicit stages.
    pub diagonal: f64,
    pub order: usize,
}

impl ButcherTableau {
    /// TR-BDF2 with `γ = 2 - √2` (trapezoidal stage to `t + γh`, then BDF2).
    pub fn tr_bdf2() -> Self {
        let gamma = 2.0 - 2f64.sqrt();
        let d = 0.5 * gamma;
        let w = 2f64.sqrt() / 4.0;
        Self {
            a: [[0.0, 0.0, 0.0], [d, d, 0.0], [w, w, d]],
            b: [w, w, d],
            b_hat: [(1.0 - w) / 3.0, (3.0 * w + 1.0) / 3.0, d / 3.0],
            c: [0.0, gamma, 1.0],
            diagonal: d,
            order: 2,
        }
    }

    /// Residuals of the order conditions: order 2 for `b`, order 3 for `b̂`,
    /// and the row-sum conditions.
    pub fn order_condition_residuals(&self) -> Vec<f64> {
        let dot = |u: &[f64; 3], v: &[f64; 3]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let c2 = [self.c[0].powi(2), self.c[1].powi(2), self.c[2].powi(2)];
        let ac = [
            dot(&self.a[0], &self.c),
            dot(&self.a[1], &self.c),
            dot(&self.a[2], &self.c),
        ];
        let mut res = vec![
            self.b.iter().sum::<f64>() - 1.0,
            dot(&self.b, &self.c) - 0.5,
            self.b_hat.iter().sum::<f64>() - 1.0,
            dot(&self.b_hat, &self.c) - 0.5,
            dot(&self.b_hat, &c2) - 1.0 / 3.0,
            dot(&self.b_hat, &ac) - 1.0 / 6.0,
        ];
        for i in 0..3 {
            res.push(self.a[i].iter().sum::<f64>() - self.c[i]);
        }
        res
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tolerance {
    Scalar(f64),
    PerState(Vec<f64>),
}

/// When the iteration-matrix Jacobian is re-evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianPolicy {
    /// Reuse until Newton converges slowly, fails, or `h` changes by > 20 %.
    Reuse,
    /// Fresh Jacobian and factorization on every step.
    EveryStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: Tolerance,
    pub initial_step: Option<f64>,
    pub min_step: f64,
    pub max_step: f64,
    pub max_newton_iterations: usize,
    /// Newton convergence threshold in the weighted RMS norm.
    pub newton_tol: f64,
    /// Step halvings allowed after a Newton failure with a fresh Jacobian.
    pub max_newton_halvings: usize,
    pub jacobian_policy: JacobianPolicy,
    /// Accepted steps after which a reused Jacobian is refreshed.
    pub max_jacobian_age: usize,
    /// Times at which a snapshot is stored; steps land on them exactly.
    pub output_times: Vec<f64>,
    /// Times steps must land on without storing a snapshot (e.g. inlet kinks).
    pub stop_times: Vec<f64>,
    /// Disables error control and uses this constant step.
    pub fixed_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: Tolerance::Scalar(1e-10),
            initial_step: None,
            min_step: 1e-12,
            max_step: f64::INFINITY,
            max_newton_iterations: 8,
            newton_tol: 0.1,
            max_newton_halvings: 2,
            jacobian_policy: JacobianPolicy::Reuse,
            max_jacobian_age: 20,
            output_times: Vec::new(),
            stop_times: Vec::new(),
            fixed_step: None,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol: Tolerance::Scalar(atol),
            ..Self::default()
        }
    }

    fn validate(&self, n: usize, span: (f64, f64)) -> Result<()> {
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::invalid(format!("rtol = {} must lie in (0, 1)", self.rtol)));
        }
        match &self.atol {
            Tolerance::Scalar(a) if !(*a > 0.0) => {
                return Err(Error::invalid("atol must be positive"))
            }
            Tolerance::PerState(v) if v.len() != n || v.iter().any(|a| !(*a > 0.0)) => {
                return Err(Error::invalid("per-state atol must be positive with one entry per state"))
            }
            _ => {}
        }
        if !(span.1 > span.0) {
            return Err(Error::invalid("integration span must satisfy tf > t0"));
        }
        if self.output_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("output times must be ascending"));
        }
        if self
            .output_times
            .iter()
            .any(|&t| t < span.0 || t > span.1)
        {
            return Err(Error::invalid("output times must lie within the integration span"));
        }
        if let Some(h) = self.fixed_step {
            if !(h > 0.0) {
                return Err(Error::invalid("fixed step must be positive"));
            }
        }
        Ok(())
    }

    fn atol_vec(&self, n: usize) -> Vec<f64> {
        match &self.atol {
            Tolerance::Scalar(a) => vec![*a; n],
            Tolerance::PerState(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegratorStats {
    pub steps: usize,
    pub rejected: usize,
    pub newton_iterations: usize,
    pub newton_failures: usize,
    pub jacobian_evaluations: usize,
    pub factorizations: usize,
    pub rhs_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub step_times: Vec<f64>,
    pub output_times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub final_state: Vec<f64>,
    pub stats: IntegratorStats,
}

impl Trajectory {
    /// Snapshot stored for output time `t`, if `t` was requested.
    pub fn state_at(&self, t: f64) -> Option<&[f64]> {
        self.output_times
            .iter()
            .position(|&s| s == t)
            .map(|k| self.states[k].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTrajectory {
    pub output_times: Vec<f64>,
    /// `∂x/∂p` (`n_x × n_p`) at each output time.
    pub sensitivities: Vec<DMatrix<f64>>,
    pub final_sensitivity: DMatrix<f64>,
}

/// Step-size controller: accept iff `error_norm ≤ 1`; the step is scaled by
/// `0.9 · error_norm^(-1/(order+1))` clamped to `[0.2, 5]`.
pub fn step_controller(error_norm: f64, h: f64, order: usize) -> (f64, bool) {
    const SAFETY: f64 = 0.9;
    const MIN_FACTOR: f64 = 0.2;
    const MAX_FACTOR: f64 = 5.0;
    let accept = error_norm <= 1.0;
    let factor = if error_norm == 0.0 {
        MAX_FACTOR
    } else if !error_norm.is_finite() {
        MIN_FACTOR
    } else {
        (SAFETY * error_norm.powf(-1.0 / (order as f64 + 1.0))).clamp(MIN_FACTOR, MAX_FACTOR)
    };
    (h * factor, accept)
}

/// Integrates `sys` from `x0` over `span`.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    span: (f64, f64),
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    Integrator::new(sys, config, span)?
        .run(x0, None)
        .map(|(traj, _)| traj)
}

/// Integrates `sys` together with the forward sensitivities `∂x/∂p`.
pub fn integrate_with_sensitivities<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    s0: &DMatrix<f64>,
    span: (f64, f64),
    config: &IntegratorConfig,
) -> Result<(Trajectory, SensitivityTrajectory)> {
    if s0.nrows() != sys.dim() || s0.ncols() != sys.n_params() {
        return Err(Error::invalid(format!(
            "initial sensitivity must be {} × {}",
            sys.dim(),
            sys.n_params()
        )));
    }
    let (traj, sens) = Integrator::new(sys, config, span)?.run(x0, Some(s0.clone()))?;
    Ok((traj, sens.expect("sensitivities requested")))
}

/// Appends quadrature states `Q̇_k = x[selection[k]]` to an ODE system.
#[derive(Debug, Clone)]
pub struct Quadratures<S> {
    pub inner: S,
    pub selection: Vec<usize>,
}

/// Augments `inner` with one quadrature state per selected state index.
pub fn attach_quadratures<S: OdeSystem>(inner: S, selection: Vec<usize>) -> Quadratures<S> {
    Quadratures { inner, selection }
}

impl<S: OdeSystem> Quadratures<S> {
    pub fn inner_dim(&self) -> usize {
        self.inner.dim()
    }

    /// Index of quadrature `k` in the augmented state.
    pub fn quadrature_index(&self, k: usize) -> usize {
        self.inner.dim() + k
    }

    pub fn augment_initial(&self, x0: &[f64]) -> Vec<f64> {
        let mut x = x0.to_vec();
        x.resize(self.dim(), 0.0);
        x
    }

    pub fn augment_sensitivity(&self, s0: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.dim(), s0.ncols());
        s.rows_mut(0, s0.nrows()).copy_from(s0);
        s
    }
}

impl<S: OdeSystem> OdeSystem for Quadratures<S> {
    fn dim(&self) -> usize {
        self.inner.dim() + self.selection.len()
    }
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.inner.dim();
        self.inner.rhs(t, &x[..n], &mut out[..n])?;
        for (k, &s) in self.selection.iter().enumerate() {
            out[n + k] = x[s];
        }
        Ok(())
    }
    fn jac_x(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        let n = self.inner.dim();
        let mut inner = DMatrix::zeros(n, n);
        self.inner.jac_x(t, &x[..n], &mut inner)?;
        out.fill(0.0);
        out.view_mut((0, 0), (n, n)).copy_from(&inner);
        for (k, &s) in self.selection.iter().enumerate() {
            out[(n + k, s)] = 1.0;
        }
        Ok(())
    }
    fn jac_p(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        let n = self.inner.dim();
        let mut inner = DMatrix::zeros(n, self.n_params());
        self.inner.jac_p(t, &x[..n], &mut inner)?;
        out.fill(0.0);
        out.rows_mut(0, n).copy_from(&inner);
        Ok(())
    }
}

struct Factorization {
    lu: LU<f64, Dyn, Dyn>,
    h: f64,
}

enum StageFailure {
    Diverged,
    Rhs(Error),
}

struct Integrator<'a, S: ?Sized> {
    sys: &'a S,
    cfg: &'a IntegratorConfig,
    tab: ButcherTableau,
    span: (f64, f64),
    n: usize,
    atol: Vec<f64>,
    stats: IntegratorStats,
}

impl<'a, S: OdeSystem + ?Sized> Integrator<'a, S> {
    fn new(sys: &'a S, cfg: &'a IntegratorConfig, span: (f64, f64)) -> Result<Self> {
        let n = sys.dim();
        cfg.validate(n, span)?;
        Ok(Self {
            sys,
            cfg,
            tab: ButcherTableau::tr_bdf2(),
            span,
            n,
            atol: cfg.atol_vec(n),
            stats: IntegratorStats::default(),
        })
    }

    fn weights(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(&self.atol)
            .map(|((x, y), at)| 1.0 / (self.cfg.rtol * x.abs().max(y.abs()) + at))
            .collect()
    }

    fn wrms(v: &[f64], w: &[f64]) -> f64 {
        let s: f64 = v.iter().zip(w).map(|(a, b)| (a * b).powi(2)).sum();
        (s / v.len().max(1) as f64).sqrt()
    }

    fn factor(&mut self, jac: &DMatrix<f64>, h: f64) -> Result<Factorization> {
        let mut m = jac * (-h * self.tab.diagonal);
        for i in 0..self.n {
            m[(i, i)] += 1.0;
        }
        self.stats.factorizations += 1;
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::Integration {
                t: f64::NAN,
                h,
                message: "singular iteration matrix".into(),
            });
        }
        Ok(Factorization { lu, h })
    }

    fn eval_jac(&mut self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        self.stats.jacobian_evaluations += 1;
        self.sys.jac_x(t, x, out)
    }

    /// Solves `X = known + h d f(t, X)` by modified Newton; returns `X` and
    /// the stage derivative.
    #[allow(clippy::too_many_arguments)]
    fn solve_stage(
        &mut self,
        t: f64,
        h: f64,
        known: &[f64],
        guess: Vec<f64>,
        fact: &Factorization,
        weights: &[f64],
        eta: &mut f64,
    ) -> std::result::Result<(Vec<f64>, Vec<f64>, f64), StageFailure> {
        let hd = h * self.tab.diagonal;
        let mut x = guess;
        let mut fx = vec![0.0; self.n];
        let mut prev_norm = f64::INFINITY;
        let mut rate: f64 = 0.0;
        let tol = self.cfg.newton_tol;
        for it in 0..self.cfg.max_newton_iterations {
            self.stats.newton_iterations += 1;
            self.stats.rhs_evaluations += 1;
            self.sys.rhs(t, &x, &mut fx).map_err(StageFailure::Rhs)?;
            let g = DVector::from_iterator(
                self.n,
                (0..self.n).map(|i| -(x[i] - known[i] - hd * fx[i])),
            );
            let dx = fact.lu.solve(&g).ok_or(StageFailure::Diverged)?;
            for i in 0..self.n {
                x[i] += dx[i];
            }
            let norm = Self::wrms(dx.as_slice(), weights);
            if !norm.is_finite() {
                return Err(StageFailure::Diverged);
            }
            if it > 0 {
                rate = norm / prev_norm;
                if rate >= 1.0 {
                    return Err(StageFailure::Diverged);
                }
                *eta = rate / (1.0 - rate);
            }
            if *eta * norm <= tol || norm <= 1e-3 * tol {
                let k: Vec<f64> = (0..self.n).map(|i| (x[i] - known[i]) / hd).collect();
                return Ok((x, k, rate));
            }
            prev_norm = norm;
        }
        Err(StageFailure::Diverged)
    }

    fn initial_step(&self, x: &[f64], f: &[f64]) -> f64 {
        if let Some(h) = self.cfg.fixed_step.or(self.cfg.initial_step) {
            return h;
        }
        let w = self.weights(x, x);
        let d0 = Self::wrms(x, &w);
        let d1 = Self::wrms(f, &w);
        let span = self.span.1 - self.span.0;
        let h = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6 * span
        } else {
            0.01 * d0 / d1
        };
        h.min(self.cfg.max_step).min(span).max(self.cfg.min_step)
    }

    fn run(
        mut self,
        x0: &[f64],
        s0: Option<DMatrix<f64>>,
    ) -> Result<(Trajectory, Option<SensitivityTrajectory>)> {
        let n = self.n;
        if x0.len() != n {
            return Err(Error::invalid(format!("x0 has length {}, expected {n}", x0.len())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0 must be finite"));
        }
        let (t0, tf) = self.span;
        let tab = self.tab;
        let d = tab.diagonal;
        let n_p = self.sys.n_params();

        let mut t = t0;
        let mut x = x0.to_vec();
        let mut k1 = vec![0.0; n];
        self.stats.rhs_evaluations += 1;
        self.sys.rhs(t, &x, &mut k1)?;

        let mut out_times = Vec::new();
        let mut out_states = Vec::new();
        let mut out_sens = Vec::new();
        let mut next_out = 0;
        let outputs = &self.cfg.output_times;
        while next_out < outputs.len() && outputs[next_out] == t0 {
            out_times.push(t0);
            out_states.push(x.clone());
            if let Some(s) = &s0 {
                out_sens.push(s.clone());
            }
            next_out += 1;
        }

        let mut targets: Vec<f64> = outputs
            .iter()
            .chain(&self.cfg.stop_times)
            .copied()
            .filter(|&s| s > t0 && s < tf)
            .collect();
        targets.push(tf);
        targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        targets.dedup();
        let mut ti = 0;

        let mut jac = DMatrix::zeros(n, n);
        self.eval_jac(t, &x, &mut jac)?;
        let mut jac_fresh = true;
        let mut fact: Option<Factorization> = None;

        // Sensitivity state: S, Ṡ at the current point, and ∂f/∂p scratch.
        let mut sens = s0;
        let mut fp = DMatrix::zeros(n, n_p);
        let mut sdot1 = match &sens {
            Some(s) => {
                self.sys.jac_p(t, &x, &mut fp)?;
                Some(&jac * s + &fp)
            }
            None => None,
        };

        let mut h = self.initial_step(&x, &k1);
        let mut step_times = vec![t0];
        let mut eta: f64 = 1.0;
        let mut refresh_pending = false;
        let mut jac_age = 0usize;

        while t < tf {
            if self.stats.steps + self.stats.rejected >= self.cfg.max_steps {
                return Err(Error::Integration {
                    t,
                    h,
                    message: format!("exceeded {} steps", self.cfg.max_steps),
                });
            }
            let target = targets[ti];
            let h_proposed = self.cfg.fixed_step.unwrap_or(h).min(self.cfg.max_step);
            let mut h_step = h_proposed;
            let mut hit = false;
            if t + 1.01 * h_step >= target {
                h_step = target - t;
                hit = true;
            }
            if h_step < self.cfg.min_step && !hit {
                return Err(Error::Integration {
                    t,
                    h: h_step,
                    message: "step size underflow".into(),
                });
            }

            let mut halvings = 0;
            let stage_result = loop {
                let policy_refresh = self.cfg.jacobian_policy == JacobianPolicy::EveryStep
                    || refresh_pending
                    || jac_age >= self.cfg.max_jacobian_age;
                if policy_refresh && !jac_fresh {
                    self.eval_jac(t, &x, &mut jac)?;
                    jac_fresh = true;
                    jac_age = 0;
                    fact = None;
                }
                refresh_pending = false;
                let needs_factor = match &fact {
                    None => true,
                    Some(f) => {
                        self.cfg.jacobian_policy == JacobianPolicy::EveryStep && f.h != h_step
                            || (f.h / h_step - 1.0).abs() > 0.2
                    }
                };
                if needs_factor {
                    fact = Some(self.factor(&jac, h_step).map_err(|e| with_time(e, t))?);
                }
                let f = fact.take().expect("factorization present");
                let weights = self.weights(&x, &x);
                let res = self.attempt(t, h_step, &x, &k1, &f, &weights, &mut eta);
                fact = Some(f);
                match res {
                    Ok(stages) => break stages,
                    Err(fail) => {
                        self.stats.newton_failures += 1;
                        if !jac_fresh {
                            self.eval_jac(t, &x, &mut jac)?;
                            jac_fresh = true;
                            jac_age = 0;
                            fact = None;
                            continue;
                        }
                        if halvings < self.cfg.max_newton_halvings && self.cfg.fixed_step.is_none() {
                            halvings += 1;
                            h_step *= 0.5;
                            hit = false;
                            fact = None;
                            continue;
                        }
                        let message = match fail {
                            StageFailure::Diverged => "Newton iteration failed to converge".to_string(),
                            StageFailure::Rhs(e) => format!("right-hand side failed: {e}"),
                        };
                        return Err(Error::Integration { t, h: h_step, message });
                    }
                }
            };
            let (x2, k2, x3, k3, rate) = stage_result;
            if rate > 0.5 {
                refresh_pending = true;
            }

            // Embedded error estimate, filtered through the iteration matrix.
            let f = fact.as_ref().expect("factorization present");
            let accept;
            let factor_h;
            if self.cfg.fixed_step.is_some() {
                accept = true;
                factor_h = h_proposed;
            } else {
                let e: Vec<f64> = (0..n)
                    .map(|i| {
                        h_step
                            * ((tab.b[0] - tab.b_hat[0]) * k1[i]
                                + (tab.b[1] - tab.b_hat[1]) * k2[i]
                                + (tab.b[2] - tab.b_hat[2]) * k3[i])
                    })
                    .collect();
                let e = f
                    .lu
                    .solve(&DVector::from_vec(e))
                    .map(|v| v.as_slice().to_vec())
                    .unwrap_or_else(|| vec![f64::INFINITY; n]);
                let w = self.weights(&x3, &x3);
                let err = Self::wrms(&e, &w);
                let (h_new, ok) = step_controller(err, h_step, tab.order);
                accept = ok;
                factor_h = if ok && hit {
                    h_new.max(h_proposed.min(5.0 * h_step))
                } else {
                    h_new
                };
            }

            if !accept {
                self.stats.rejected += 1;
                // A stale Jacobian also distorts the filtered error estimate.
                if !jac_fresh {
                    refresh_pending = true;
                }
                h = factor_h;
                if h < self.cfg.min_step {
                    return Err(Error::Integration {
                        t,
                        h,
                        message: "step size underflow after error test failure".into(),
                    });
                }
                continue;
            }

            if let (Some(s), Some(sd1)) = (sens.as_mut(), sdot1.as_mut()) {
                let t2 = t + tab.c[1] * h_step;
                let t3 = t + h_step;
                let mut jac2 = DMatrix::zeros(n, n);
                self.eval_jac(t2, &x2, &mut jac2).map_err(|e| with_time(e, t2))?;
                self.sys.jac_p(t2, &x2, &mut fp)?;
                let f2 = self.factor(&jac2, h_step).map_err(|e| with_time(e, t2))?;
                let rhs2 = &*s + &*sd1 * (h_step * tab.a[1][0]) + &fp * (h_step * d);
                let s2 = f2.lu.solve(&rhs2).ok_or_else(|| singular(t2, h_step))?;
                let sd2 = &jac2 * &s2 + &fp;

                let mut jac3 = DMatrix::zeros(n, n);
                self.eval_jac(t3, &x3, &mut jac3).map_err(|e| with_time(e, t3))?;
                self.sys.jac_p(t3, &x3, &mut fp)?;
                let f3 = self.factor(&jac3, h_step).map_err(|e| with_time(e, t3))?;
                let rhs3 = &*s + &*sd1 * (h_step * tab.a[2][0]) + &sd2 * (h_step * tab.a[2][1]) + &fp * (h_step * d);
                let s3 = f3.lu.solve(&rhs3).ok_or_else(|| singular(t3, h_step))?;
                *sd1 = &jac3 * &s3 + &fp;
                *s = s3;
                // The stage-3 Jacobian is exact at the new point; keep it for
                // the next state step together with its factorization.
                jac = jac3;
                jac_fresh = true;
                jac_age = 0;
                fact = Some(f3);
            } else {
                jac_fresh = false;
                jac_age += 1;
            }

            t = if hit { target } else { t + h_step };
            x = x3;
            k1 = k3;
            self.stats.steps += 1;
            step_times.push(t);
            h = factor_h;
            if hit {
                while next_out < outputs.len() && outputs[next_out] == t {
                    out_times.push(t);
                    out_states.push(x.clone());
                    if let Some(s) = &sens {
                        out_sens.push(s.clone());
                    }
                    next_out += 1;
                }
                ti += 1;
            }
        }

        let traj = Trajectory {
            step_times,
            output_times: out_times.clone(),
            states: out_states,
            final_state: x,
            stats: self.stats,
        };
        let sens_traj = sens.map(|s| SensitivityTrajectory {
            output_times: out_times,
            sensitivities: out_sens,
            final_sensitivity: s,
        });
        Ok((traj, sens_traj))
    }

    #[allow(clippy::type_complexity, clippy::too_many_arguments)]
    fn attempt(
        &mut self,
        t: f64,
        h: f64,
        x: &[f64],
        k1: &[f64],
        fact: &Factorization,
        weights: &[f64],
        eta: &mut f64,
    ) -> std::result::Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64), StageFailure> {
        let n = self.n;
        let a = self.tab.a;
        let c = self.tab.c;
        let known2: Vec<f64> = (0..n).map(|i| x[i] + h * a[1][0] * k1[i]).collect();
        let guess2: Vec<f64> = (0..n).map(|i| x[i] + h * c[1] * k1[i]).collect();
        let (x2, k2, r2) = self.solve_stage(t + c[1] * h, h, &known2, guess2, fact, weights, eta)?;
        let known3: Vec<f64> = (0..n)
            .map(|i| x[i] + h * (a[2][0] * k1[i] + a[2][1] * k2[i]))
            .collect();
        // Quadratic extrapolation through (t, k1), (t + γh, k2).
        let guess3: Vec<f64> = (0..n)
            .map(|i| known3[i] + h * self.tab.diagonal * (k1[i] + (k2[i] - k1[i]) / c[1]))
            .collect();
        let (x3, k3, r3) = self.solve_stage(t + h, h, &known3, guess3, fact, weights, eta)?;
        Ok((x2, k2, x3, k3, r2.max(r3)))
    }
}

fn with_time(e: Error, t: f64) -> Error {
    match e {
        Error::Integration { h, message, .. } => Error::Integration { t, h, message },
        other => other,
    }
}

fn singular(t: f64, h: f64) -> Error {
    Error::Integration {
        t,
        h,
        message: "singular sensitivity iteration matrix".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> impl OdeSystem {
        FnSystem::new(
            1,
            |_t, x: &[f64], out: &mut [f64]| out[0] = -x[0],
            |_t, _x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -1.0,
        )
    }

    #[test]
    fn tableau_order_conditions() {
        let tab = ButcherTableau::tr_bdf2();
        for r in tab.order_condition_residuals() {
            assert!(r.abs() <= 1e-14, "{r}");
        }
        assert_eq!(tab.a[0][0], 0.0);
        assert_eq!(tab.a[1][1], tab.a[2][2]);
        assert!((tab.c[1] - (2.0 - 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn controller_examples() {
        let (h, ok) = step_controller(1.0, 1.0, 2);
        assert!(ok && (h - 0.9).abs() < 1e-15);
        let (h, ok) = step_controller(0.0, 1.0, 2);
        assert!(ok && h == 5.0);
        let (h, ok) = step_controller(16.0, 1.0, 2);
        assert!(!ok);
        assert!((h - 0.9 * 16f64.powf(-1.0 / 3.0)).abs() < 1e-15);
        assert!((h - 0.357).abs() < 1e-3);
    }

    #[test]
    fn exponential_decay() {
        // Local error is controlled to rtol; the global error accumulates
        // to about 10·rtol over the ~40 steps.
        let cfg = IntegratorConfig::with_tolerances(1e-6, 1e-10);
        let traj = integrate(&decay(), &[1.0], (0.0, 1.0), &cfg).unwrap();
        assert!((traj.final_state[0] - (-1f64).exp()).abs() < 1.5e-5);
        let cfg = IntegratorConfig::with_tolerances(1e-7, 1e-12);
        let traj = integrate(&decay(), &[1.0], (0.0, 1.0), &cfg).unwrap();
        assert!((traj.final_state[0] - (-1f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn time_dependent_quadrature() {
        let sys = FnSystem::new(
            1,
            |t, _x: &[f64], out: &mut [f64]| out[0] = 2.0 * t,
            |_t, _x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = 0.0,
        );
        let cfg = IntegratorConfig::with_tolerances(1e-6, 1e-10);
        let traj = integrate(&sys, &[0.0], (0.0, 1.0), &cfg).unwrap();
        assert!((traj.final_state[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn output_times_are_hit_exactly() {
        let out = vec![0.0, 0.1, 0.33, 0.5, 0.77, 1.0];
        let cfg = IntegratorConfig {
            output_times: out.clone(),
            ..IntegratorConfig::with_tolerances(1e-6, 1e-10)
        };
        let traj = integrate(&decay(), &[1.0], (0.0, 1.0), &cfg).unwrap();
        assert_eq!(traj.output_times, out);
        for (t, x) in traj.output_times.iter().zip(&traj.states) {
            assert!((x[0] - (-t).exp()).abs() < 1e-5);
        }
    }

    #[test]
    fn scalar_parameter_sensitivity() {
        let p = 2.0;
        let sys = FnSystem::with_params(
            1,
            1,
            move |_t, x: &[f64], out: &mut [f64]| out[0] = -p * x[0],
            move |_t, _x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -p,
            |_t, x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -x[0],
        );
        let cfg = IntegratorConfig::with_tolerances(1e-8, 1e-12);
        let (traj, sens) =
            integrate_with_sensitivities(&sys, &[1.0], &DMatrix::zeros(1, 1), (0.0, 1.0), &cfg).unwrap();
        assert!((traj.final_state[0] - (-2f64).exp()).abs() < 1e-6);
        let expected = -(-2f64).exp();
        assert!((sens.final_sensitivity[(0, 0)] - expected).abs() < 1e-4);
        assert!((expected + 0.135335).abs() < 1e-6);
    }

    #[test]
    fn parameter_free_system_has_zero_sensitivity() {
        let sys = FnSystem::with_params(
            1,
            2,
            |_t, x: &[f64], out: &mut [f64]| out[0] = -x[0] * x[0],
            |_t, x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -2.0 * x[0],
            |_t, _x: &[f64], j: &mut DMatrix<f64>| j.fill(0.0),
        );
        let cfg = IntegratorConfig::with_tolerances(1e-6, 1e-10);
        let (_, sens) =
            integrate_with_sensitivities(&sys, &[1.0], &DMatrix::zeros(1, 2), (0.0, 2.0), &cfg).unwrap();
        assert_eq!(sens.final_sensitivity, DMatrix::zeros(1, 2));
    }

    #[test]
    fn quadratures_of_simple_outlets() {
        // Outlet held constant: Q(T) = c* T.
        let hold = FnSystem::new(
            1,
            |_t, _x: &[f64], out: &mut [f64]| out[0] = 0.0,
            |_t, _x: &[f64], j: &mut DMatrix<f64>| j.fill(0.0),
        );
        let aug = attach_quadratures(hold, vec![0]);
        let cfg = IntegratorConfig::with_tolerances(1e-6, 1e-10);
        let traj = integrate(&aug, &aug.augment_initial(&[0.4]), (0.0, 3.0), &cfg).unwrap();
        assert!((traj.final_state[1] - 1.2).abs() < 1e-6 * 1.2);

        let zero = FnSystem::new(
            1,
            |_t, _x: &[f64], out: &mut [f64]| out[0] = 0.0,
            |_t, _x: &[f64], j: &mut DMatrix<f64>| j.fill(0.0),
        );
        let aug = attach_quadratures(zero, vec![0]);
        let traj = integrate(&aug, &aug.augment_initial(&[0.0]), (0.0, 3.0), &cfg).unwrap();
        assert_eq!(traj.final_state[1], 0.0);

        // Outlet c(t) = t: Q(2) = 2.
        let ramp = FnSystem::new(
            1,
            |_t, _x: &[f64], out: &mut [f64]| out[0] = 1.0,
            |_t, _x: &[f64], j: &mut DMatrix<f64>| j.fill(0.0),
        );
        let aug = attach_quadratures(ramp, vec![0]);
        let traj = integrate(&aug, &aug.augment_initial(&[0.0]), (0.0, 2.0), &cfg).unwrap();
        assert!((traj.final_state[1] - 2.0).abs() < 1e-6 * 2.0);
    }

    #[test]
    fn rejects_bad_configuration() {
        let cfg = IntegratorConfig::with_tolerances(2.0, 1e-10);
        assert!(integrate(&decay(), &[1.0], (0.0, 1.0), &cfg).is_err());
        let cfg = IntegratorConfig::with_tolerances(1e-6, 1e-10);
        assert!(integrate(&decay(), &[1.0], (1.0, 1.0), &cfg).is_err());
        let cfg = IntegratorConfig {
            output_times: vec![2.0],
            ..IntegratorConfig::with_tolerances(1e-6, 1e-10)
        };
        assert!(integrate(&decay(), &[1.0], (0.0, 1.0), &cfg).is_err());
    }

    fn relaxation() -> impl OdeSystem {
        FnSystem::new(
            1,
            |t, x: &[f64], out: &mut [f64]| out[0] = -1e3 * (x[0] - t.cos()) - t.sin(),
            |_t, _x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -1e3,
        )
    }

    #[test]
    fn stiff_relaxation_matches_tight_reference() {
        let reference = integrate(
            &relaxation(),
            &[1.0],
            (0.0, 2.0),
            &IntegratorConfig::with_tolerances(1e-12, 1e-14),
        )
        .unwrap();
        let rtol = 1e-6;
        let traj = integrate(
            &relaxation(),
            &[1.0],
            (0.0, 2.0),
            &IntegratorConfig::with_tolerances(rtol, 1e-10),
        )
        .unwrap();
        let diff = (traj.final_state[0] - reference.final_state[0]).abs();
        assert!(diff <= 10.0 * rtol, "{diff}");
        // Explicit Euler needs h < 2/1000, i.e. more than 1000 steps.
        assert!(traj.stats.steps < 200, "{:?}", traj.stats);
    }

    #[test]
    fn fixed_step_convergence_order_is_two() {
        let sys = FnSystem::new(
            1,
            |t, x: &[f64], out: &mut [f64]| out[0] = -x[0] * x[0] + t.sin(),
            |_t, x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -2.0 * x[0],
        );
        let solve = |h: f64| {
            let cfg = IntegratorConfig {
                fixed_step: Some(h),
                newton_tol: 1e-6,
                ..IntegratorConfig::with_tolerances(1e-10, 1e-12)
            };
            integrate(&sys, &[1.0], (0.0, 2.0), &cfg).unwrap().final_state[0]
        };
        let x: Vec<f64> = (0..4).map(|k| solve(0.1 / 2f64.powi(k))).collect();
        for k in 0..2 {
            let slope = ((x[k] - x[k + 1]) / (x[k + 1] - x[k + 2])).abs().log2();
            assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
        }
    }

    #[test]
    fn jacobian_reuse_does_not_change_solution() {
        let sys = FnSystem::new(
            2,
            |_t, x: &[f64], out: &mut [f64]| {
                out[0] = -0.04 * x[0] + 1e2 * x[1] * x[1];
                out[1] = 0.04 * x[0] - 1e2 * x[1] * x[1] - 50.0 * x[1];
            },
            |_t, x: &[f64], j: &mut DMatrix<f64>| {
                j[(0, 0)] = -0.04;
                j[(0, 1)] = 2e2 * x[1];
                j[(1, 0)] = 0.04;
                j[(1, 1)] = -2e2 * x[1] - 50.0;
            },
        );
        let rtol = 1e-6;
        let base = IntegratorConfig::with_tolerances(rtol, 1e-12);
        let reuse = integrate(&sys, &[1.0, 0.0], (0.0, 20.0), &base).unwrap();
        let cfg = IntegratorConfig {
            jacobian_policy: JacobianPolicy::EveryStep,
            ..base
        };
        let fresh = integrate(&sys, &[1.0, 0.0], (0.0, 20.0), &cfg).unwrap();
        assert!(reuse.stats.jacobian_evaluations < fresh.stats.jacobian_evaluations);
        for (a, b) in reuse.final_state.iter().zip(&fresh.final_state) {
            assert!((a - b).abs() <= 10.0 * rtol * a.abs().max(1e-6), "{a} {b}");
        }
    }

    #[test]
    fn quadrature_sensitivity_matches_integrated_state_sensitivity() {
        let p = 1.5;
        let t_end = 2.0;
        let sys = FnSystem::with_params(
            1,
            1,
            move |_t, x: &[f64], out: &mut [f64]| out[0] = -p * x[0],
            move |_t, _x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -p,
            |_t, x: &[f64], j: &mut DMatrix<f64>| j[(0, 0)] = -x[0],
        );
        let aug = attach_quadratures(sys, vec![0]);
        let cfg = IntegratorConfig::with_tolerances(1e-11, 1e-14);
        let s0 = aug.augment_sensitivity(&DMatrix::zeros(1, 1));
        let (traj, sens) =
            integrate_with_sensitivities(&aug, &aug.augment_initial(&[1.0]), &s0, (0.0, t_end), &cfg)
                .unwrap();
        let decay = (-p * t_end).exp();
        let q = (1.0 - decay) / p;
        let dq = -(1.0 - decay) / (p * p) + t_end * decay / p;
        assert!((traj.final_state[1] - q).abs() < 1e-8);
        assert!((sens.final_sensitivity[(1, 0)] - dq).abs() < 1e-8);
    }
}
