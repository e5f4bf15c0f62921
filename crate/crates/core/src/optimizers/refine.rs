use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use web_time::Instant;

use super::LeastSquares;
use crate::error::{Error, Result};
use crate::estimation::FAILURE_OBJECTIVE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Projected-gradient ∞-norm tolerance.
    pub gradient_tol: f64,
    pub step_tol: f64,
    /// Relative objective-change tolerance.
    pub objective_tol: f64,
    pub max_iterations: usize,
    pub time_limit: Option<Duration>,
    pub initial_radius: f64,
    pub max_radius: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            objective_tol: 1e-12,
            max_iterations: 100,
            time_limit: Some(Duration::from_secs(60)),
            initial_radius: 0.5,
            max_radius: 10.0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.gradient_tol, self.step_tol, self.objective_tol, self.initial_radius, self.max_radius];
        if pos.iter().any(|v| !(*v > 0.0)) || self.max_radius < self.initial_radius {
            return Err(Error::Config("refiner tolerances and radii must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefineStatus {
    Converged,
    /// Converged with at least one bound holding the gradient back.
    ConvergedAtBound,
    StepTolerance,
    ObjectiveTolerance,
    MaxIterations,
    TimeLimit,
    EvaluationFailure,
}

impl RefineStatus {
    pub fn is_failure(self) -> bool {
        self == RefineStatus::EvaluationFailure
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: RefineStatus,
    pub iterations: usize,
    pub residual_evaluations: u64,
    pub jacobian_evaluations: u64,
}

impl RefineResult {
    /// Evaluations charged: one per residual, one more per Jacobian.
    pub fn evaluations(&self) -> u64 {
        self.residual_evaluations + self.jacobian_evaluations
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, l), u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*l, *u);
    }
}

struct Model<'a> {
    g: &'a DVector<f64>,
    b: &'a DMatrix<f64>,
}

impl Model<'_> {
    fn q(&self, s: &DVector<f64>) -> f64 {
        self.g.dot(s) + 0.5 * s.dot(&(self.b * s))
    }
}

/// Projected step `P(x + s) − x`.
fn projected(x: &[f64], s: &DVector<f64>, lower: &[f64], upper: &[f64]) -> DVector<f64> {
    let mut y: Vec<f64> = x.iter().zip(s.iter()).map(|(a, b)| a + b).collect();
    project(&mut y, lower, upper);
    DVector::from_iterator(x.len(), y.iter().zip(x).map(|(a, b)| a - b))
}

/// Generalized Cauchy step along the projected steepest-descent path.
fn cauchy_step(x: &[f64], m: &Model, delta: f64, lower: &[f64], upper: &[f64]) -> DVector<f64> {
    let gnorm = m.g.norm();
    let mut alpha = delta / gnorm;
    let mut s = DVector::zeros(x.len());
    for _ in 0..60 {
        s = projected(x, &(-alpha * m.g), lower, upper);
        if s.norm() <= delta * (1.0 + 1e-12) && m.q(&s) <= 0.01 * m.g.dot(&s) {
            return s;
        }
        alpha *= 0.5;
    }
    s
}

/// Steihaug CG on the free variables, starting from step `s`.
fn subspace_step(
    x: &[f64],
    s: &DVector<f64>,
    m: &Model,
    delta: f64,
    lower: &[f64],
    upper: &[f64],
) -> DVector<f64> {
    let n = x.len();
    let free: Vec<usize> = (0..n)
        .filter(|&i| {
            let y = x[i] + s[i];
            y > lower[i] && y < upper[i]
        })
        .collect();
    if free.is_empty() {
        return s.clone();
    }
    let grad_q = m.g + m.b * s;
    let mut w = s.clone();
    let mut res = DVector::from_iterator(free.len(), free.iter().map(|&i| -grad_q[i]));
    let res0 = res.norm();
    let mut p = res.clone();
    let embed = |v: &DVector<f64>| {
        let mut full = DVector::zeros(n);
        for (k, &i) in free.iter().enumerate() {
            full[i] = v[k];
        }
        full
    };
    let to_boundary = |w: &DVector<f64>, p: &DVector<f64>| {
        // τ ≥ 0 with ‖w + τp‖ = Δ
        let (a, b, c) = (p.dot(p), 2.0 * w.dot(p), w.dot(w) - delta * delta);
        let disc = (b * b - 4.0 * a * c).max(0.0);
        w + p * ((-b + disc.sqrt()) / (2.0 * a))
    };
    for _ in 0..free.len() + 1 {
        if res.norm() <= 1e-2 * res0 || res.norm() < 1e-300 {
            break;
        }
        let pf = embed(&p);
        let bp = m.b * &pf;
        let curv = pf.dot(&bp);
        if curv <= 0.0 {
            w = to_boundary(&w, &pf);
            break;
        }
        let alpha = res.norm_squared() / curv;
        let trial = &w + &pf * alpha;
        if trial.norm() >= delta {
            w = to_boundary(&w, &pf);
            break;
        }
        w = trial;
        let bp_free = DVector::from_iterator(free.len(), free.iter().map(|&i| bp[i]));
        let new_res = &res - bp_free * alpha;
        let beta = new_res.norm_squared() / res.norm_squared();
        p = &new_res + &p * beta;
        res = new_res;
    }
    // Project back onto the box; shorten the free direction if projection hurts.
    let q0 = m.q(s);
    let dir = &w - s;
    let mut t = 1.0;
    for _ in 0..20 {
        let cand = projected(x, &(s + &dir * t), lower, upper);
        if m.q(&cand) <= q0 {
            return cand;
        }
        t *= 0.5;
    }
    s.clone()
}

fn projected_gradient(x: &[f64], g: &DVector<f64>, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| x[i] - (x[i] - g[i]).clamp(lower[i], upper[i]))
        .collect()
}

/// Bound-constrained trust-region Gauss-Newton: each step minimizes
/// `½‖J s + r‖²` within `‖s‖ ≤ Δ` and the box, via a generalized Cauchy
/// point followed by projected Steihaug CG on the free variables. Never
/// returns a point worse than `x0`.
pub fn trust_region_gn(
    x0: &[f64],
    problem: &dyn LeastSquares,
    lower: &[f64],
    upper: &[f64],
    config: &RefinerConfig,
) -> Result<RefineResult> {
    config.validate()?;
    let n = problem.dim();
    if x0.len() != n || lower.len() != n || upper.len() != n {
        return Err(Error::invalid("refiner dimensions disagree"));
    }
    if (0..n).any(|i| !(lower[i] <= x0[i] && x0[i] <= upper[i])) {
        return Err(Error::invalid("refiner start point lies outside the box"));
    }
    let started = Instant::now();
    let mut out = RefineResult {
        x: x0.to_vec(),
        objective: FAILURE_OBJECTIVE,
        status: RefineStatus::EvaluationFailure,
        iterations: 0,
        residual_evaluations: 1,
        jacobian_evaluations: 1,
    };
    let (mut r, mut j) = match problem.residuals_and_jacobian(x0) {
        Ok(v) => v,
        Err(_) => return Ok(out),
    };
    let half = |r: &[f64]| 0.5 * r.iter().map(|v| v * v).sum::<f64>();
    out.objective = half(&r);
    if !out.objective.is_finite() {
        out.objective = FAILURE_OBJECTIVE;
        return Ok(out);
    }
    let mut delta = config.initial_radius;
    loop {
        let rv = DVector::from_column_slice(&r);
        let g = j.transpose() * &rv;
        let pg = projected_gradient(&out.x, &g, lower, upper);
        if pg.iter().all(|v| v.abs() <= config.gradient_tol) {
            let held = (0..n).any(|i| {
                (out.x[i] <= lower[i] || out.x[i] >= upper[i]) && g[i].abs() > config.gradient_tol
            });
            out.status = if held { RefineStatus::ConvergedAtBound } else { RefineStatus::Converged };
            return Ok(out);
        }
        if out.iterations >= config.max_iterations {
            out.status = RefineStatus::MaxIterations;
            return Ok(out);
        }
        if config.time_limit.is_some_and(|l| started.elapsed() >= l) {
            out.status = RefineStatus::TimeLimit;
            return Ok(out);
        }
        let b = j.transpose() * &j;
        let model = Model { g: &g, b: &b };
        let sc = cauchy_step(&out.x, &model, delta, lower, upper);
        let mut s = sc;
        for _ in 0..3 {
            let next = subspace_step(&out.x, &s, &model, delta, lower, upper);
            let done = (&next - &s).norm() <= 1e-15 * (1.0 + s.norm());
            s = next;
            if done {
                break;
            }
        }
        let pred = -model.q(&s);
        let snorm = s.norm();
        out.iterations += 1;
        if !(pred > 0.0) || snorm <= config.step_tol {
            out.status = RefineStatus::StepTolerance;
            return Ok(out);
        }
        let mut xt: Vec<f64> = out.x.iter().zip(s.iter()).map(|(a, b)| a + b).collect();
        project(&mut xt, lower, upper);
        out.residual_evaluations += 1;
        let phi_t = match problem.residuals(&xt) {
            Ok(rt) => {
                let v = half(&rt);
                if v.is_finite() { v } else { f64::INFINITY }
            }
            Err(_) => f64::INFINITY,
        };
        let ared = out.objective - phi_t;
        let rho = ared / pred;
        if rho < 0.25 {
            delta = 0.25 * snorm;
        } else if rho > 0.75 && snorm >= 0.99 * delta {
            delta = (2.0 * delta).min(config.max_radius);
        }
        if rho > 1e-4 {
            out.residual_evaluations += 1;
            out.jacobian_evaluations += 1;
            let fresh = problem.residuals_and_jacobian(&xt);
            let previous = out.objective;
            out.x = xt;
            out.objective = phi_t;
            match fresh {
                Ok((rn, jn)) => {
                    r = rn;
                    j = jn;
                }
                Err(_) => {
                    out.status = RefineStatus::EvaluationFailure;
                    return Ok(out);
                }
            }
            if snorm <= config.step_tol {
                out.status = RefineStatus::StepTolerance;
                return Ok(out);
            }
            if ared <= config.objective_tol * previous {
                out.status = RefineStatus::ObjectiveTolerance;
                return Ok(out);
            }
        } else if delta <= config.step_tol {
            out.status = RefineStatus::StepTolerance;
            return Ok(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::FnLeastSquares;

    fn linear() -> FnLeastSquares<'static> {
        FnLeastSquares::new(
            2,
            |x| vec![x[0] - 0.25, x[1] - 0.75],
            |_| DMatrix::identity(2, 2),
        )
    }

    #[test]
    fn linear_residuals_converge_quickly() {
        let res = trust_region_gn(&[0.0, 0.0], &linear(), &[-10.0; 2], &[10.0; 2], &RefinerConfig::default()).unwrap();
        assert!((res.x[0] - 0.25).abs() < 1e-12 && (res.x[1] - 0.75).abs() < 1e-12);
        assert!(res.iterations <= 3, "{} iterations", res.iterations);
        assert_eq!(res.status, RefineStatus::Converged);
    }

    #[test]
    fn stationary_start_takes_no_iterations() {
        let res = trust_region_gn(&[0.25, 0.75], &linear(), &[0.0; 2], &[1.0; 2], &RefinerConfig::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.status, RefineStatus::Converged);
        assert_eq!(res.evaluations(), 2);
    }

    #[test]
    fn active_bound_is_reported() {
        let pb = FnLeastSquares::new(1, |x| vec![x[0] - 2.0], |_| DMatrix::identity(1, 1));
        let res = trust_region_gn(&[0.5], &pb, &[0.0], &[1.0], &RefinerConfig::default()).unwrap();
        assert_eq!(res.x, vec![1.0]);
        assert_eq!(res.status, RefineStatus::ConvergedAtBound);
    }

    #[test]
    fn rosenbrock_residuals() {
        let pb = FnLeastSquares::new(
            2,
            |x| vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]],
            |x| DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]),
        );
        let res = trust_region_gn(&[-1.2, 1.0], &pb, &[-2.0; 2], &[2.0; 2], &RefinerConfig::default()).unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6, "{:?}", res);
    }

    #[test]
    fn never_worse_than_start() {
        // Nonzero-residual problem where GN steps can overshoot.
        let pb = FnLeastSquares::new(
            1,
            |x| vec![(3.0 * x[0]).sin() + 0.5, x[0] - 0.1],
            |x| DMatrix::from_row_slice(2, 1, &[3.0 * (3.0 * x[0]).cos(), 1.0]),
        );
        for start in [0.0, 0.3, 0.6, 0.9, 1.0] {
            let phi0 = {
                let r = pb.residuals(&[start]).unwrap();
                0.5 * r.iter().map(|v| v * v).sum::<f64>()
            };
            let res = trust_region_gn(&[start], &pb, &[0.0], &[1.0], &RefinerConfig::default()).unwrap();
            assert!(res.objective <= phi0);
            assert!((0.0..=1.0).contains(&res.x[0]));
        }
    }

    #[test]
    fn rejects_outside_start() {
        assert!(trust_region_gn(&[2.0, 0.0], &linear(), &[0.0; 2], &[1.0; 2], &RefinerConfig::default()).is_err());
    }
}
