//! Nodal discontinuous Galerkin semi-discretization on a uniform 1-D mesh.
//!
//! Each element carries `p + 1` Legendre-Gauss-Lobatto nodes. Advection uses
//! the upwind flux, diffusion the symmetric interior penalty method with
//! `τ = (p + 1)² / h`. The Danckwerts inlet is imposed weakly by setting the
//! total inlet flux to `v c_in(t)`; the outlet diffusive flux is zero.
//! Reaction terms are collocated at the nodes.
//!
//! State layout is component-major: component `i`, node `n` lives at
//! `x[i * n_nodes + n]`.

use nalgebra::{DMatrix, DVector};

use crate::adr::{validate_system, AdrSystem};
use crate::error::{Error, Result};
use crate::esdirk::OdeSystem;

/// Legendre-Gauss-Lobatto nodes on `[-1, 1]`, ascending.
pub fn lgl_nodes(order: usize) -> Vec<f64> {
    assert!(order >= 1);
    let n = order;
    // Newton iteration on (1 - x²) P'_n from Chebyshev-Gauss-Lobatto guesses.
    let mut x: Vec<f64> = (0..=n)
        .map(|i| -(std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    for _ in 0..100 {
        let mut max_dx: f64 = 0.0;
        for xi in x.iter_mut() {
            let (pn, pn1) = legendre_pair(n, *xi);
            let dx = (*xi * pn - pn1) / ((n + 1) as f64 * pn);
            *xi -= dx;
            max_dx = max_dx.max(dx.abs());
        }
        if max_dx < 1e-16 {
            break;
        }
    }
    x[0] = -1.0;
    x[n] = 1.0;
    x
}

/// `(P_n(x), P_{n-1}(x))`.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut p_prev, mut p) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

/// Orthonormal Legendre values and derivatives of degree `0..=n` at `x`.
fn orthonormal_legendre(n: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut dp = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = x;
        dp[1] = 1.0;
    }
    for k in 1..n {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * x * p[k] - kf * p[k - 1]) / (kf + 1.0);
        dp[k + 1] = dp[k - 1] + (2.0 * kf + 1.0) * p[k];
    }
    for k in 0..=n {
        let s = ((2 * k + 1) as f64 / 2.0).sqrt();
        p[k] *= s;
        dp[k] *= s;
    }
    (p, dp)
}

/// Gauss-Legendre points and weights on `[-1, 1]`, used for error norms.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut xi = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (pn, pn1) = legendre_pair(n, xi);
            let dp = n as f64 * (xi * pn - pn1) / (xi * xi - 1.0);
            let dx = pn / dp;
            xi -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (pn, pn1) = legendre_pair(n, xi);
        let dp = n as f64 * (xi * pn - pn1) / (xi * xi - 1.0);
        x[i] = xi;
        w[i] = 2.0 / ((1.0 - xi * xi) * dp * dp);
    }
    (x, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    pub length: f64,
    pub element_count: usize,
    pub order: usize,
    /// `element_count + 1` ascending element boundaries.
    pub boundaries: Vec<f64>,
    /// Node coordinates per element.
    pub nodes: Vec<Vec<f64>>,
}

impl Mesh1D {
    pub fn nodes_per_element(&self) -> usize {
        self.order + 1
    }

    pub fn node_count(&self) -> usize {
        self.element_count * (self.order + 1)
    }

    pub fn element_width(&self) -> f64 {
        self.length / self.element_count as f64
    }

    /// All node coordinates in layout order (duplicated at element interfaces).
    pub fn coordinates(&self) -> Vec<f64> {
        self.nodes.iter().flatten().copied().collect()
    }
}

/// Uniform mesh with LGL nodes mapped affinely into each element.
pub fn build_mesh(length: f64, element_count: usize, order: usize) -> Result<Mesh1D> {
    if !(length > 0.0) || element_count == 0 || order == 0 {
        return Err(Error::invalid(format!(
            "mesh needs L > 0, N_E ≥ 1, p ≥ 1 (got L = {length}, N_E = {element_count}, p = {order})"
        )));
    }
    let h = length / element_count as f64;
    let boundaries: Vec<f64> = (0..=element_count).map(|k| k as f64 * h).collect();
    let reference = lgl_nodes(order);
    let nodes = (0..element_count)
        .map(|k| {
            let left = boundaries[k];
            reference.iter().map(|r| left + 0.5 * h * (r + 1.0)).collect()
        })
        .collect();
    Ok(Mesh1D {
        length,
        element_count,
        order,
        boundaries,
        nodes,
    })
}

/// Reference-element operators.
#[derive(Debug, Clone)]
pub struct DgOperators {
    pub reference_nodes: Vec<f64>,
    /// Differentiation matrix on `[-1, 1]`.
    pub differentiation: DMatrix<f64>,
    /// Exact mass matrix on `[-1, 1]`.
    pub mass: DMatrix<f64>,
    pub inverse_mass: DMatrix<f64>,
    /// Maps face values (left, right) into the element interior: `M⁻¹ [e₀ e_p]`.
    pub lift: DMatrix<f64>,
    pub inverse_vandermonde: DMatrix<f64>,
    pub penalty_factor: f64,
}

impl DgOperators {
    pub fn new(order: usize) -> Self {
        let r = lgl_nodes(order);
        let np = order + 1;
        let mut v = DMatrix::zeros(np, np);
        let mut vr = DMatrix::zeros(np, np);
        for (i, &ri) in r.iter().enumerate() {
            let (p, dp) = orthonormal_legendre(order, ri);
            for j in 0..np {
                v[(i, j)] = p[j];
                vr[(i, j)] = dp[j];
            }
        }
        let v_inv = v.clone().try_inverse().expect("LGL Vandermonde is invertible");
        let differentiation = &vr * &v_inv;
        let inverse_mass = &v * v.transpose();
        let mass = inverse_mass
            .clone()
            .try_inverse()
            .expect("mass matrix is invertible");
        let mut faces = DMatrix::zeros(np, 2);
        faces[(0, 0)] = 1.0;
        faces[(np - 1, 1)] = 1.0;
        let lift = &inverse_mass * faces;
        Self {
            reference_nodes: r,
            differentiation,
            mass,
            inverse_mass,
            lift,
            inverse_vandermonde: v_inv,
            penalty_factor: ((order + 1) * (order + 1)) as f64,
        }
    }

    /// Lagrange basis values at reference coordinate `r`.
    pub fn basis_at(&self, r: f64) -> DVector<f64> {
        let order = self.reference_nodes.len() - 1;
        let (p, _) = orthonormal_legendre(order, r);
        self.inverse_vandermonde.transpose() * DVector::from_vec(p)
    }
}

/// Linear transport operator of one component: `u̇ = A u + g c_in(t)`.
#[derive(Debug, Clone)]
struct TransportOperator {
    a: DMatrix<f64>,
    inlet_gain: DVector<f64>,
}

/// Assembles `M⁻¹ K` and the inlet gain for constant `(v, D)`, `v ≥ 0`.
fn assemble_transport(mesh: &Mesh1D, ops: &DgOperators, v: f64, d: f64) -> TransportOperator {
    let np = mesh.nodes_per_element();
    let ne = mesh.element_count;
    let nn = mesh.node_count();
    let h = mesh.element_width();
    let jac = 0.5 * h;
    let dr = &ops.differentiation;
    let mr = &ops.mass;
    let tau = ops.penalty_factor / h;
    let last = np - 1;

    // ∫ φ_i' φ_j and ∫ φ_i' φ_j' on one element.
    let advec = dr.transpose() * mr;
    let stiff = dr.transpose() * mr * dr / jac;

    let mut k = DMatrix::<f64>::zeros(nn, nn);
    for e in 0..ne {
        let o = e * np;
        for i in 0..np {
            for j in 0..np {
                k[(o + i, o + j)] += v * advec[(i, j)] - d * stiff[(i, j)];
            }
        }
    }

    // Interior faces: F̂ = v u⁻ − D {u_z} + τ D [u], plus the symmetric term
    // {D φ_z}[u], with [w] = w⁻ − w⁺.
    for e in 0..ne.saturating_sub(1) {
        let left = e * np;
        let right = (e + 1) * np;
        let um = left + last;
        let up = right;
        // Coefficients of F̂ on global unknowns.
        let mut fhat: Vec<(usize, f64)> = Vec::with_capacity(2 * np + 2);
        fhat.push((um, v + tau * d));
        fhat.push((up, -tau * d));
        for j in 0..np {
            fhat.push((left + j, -0.5 * d * dr[(last, j)] / jac));
            fhat.push((right + j, -0.5 * d * dr[(0, j)] / jac));
        }
        for &(col, coef) in &fhat {
            k[(um, col)] -= coef;
            k[(up, col)] += coef;
        }
        // Symmetric term: ½ D φ_i'(face) (u⁻ − u⁺) in both adjacent elements.
        for i in 0..np {
            let gl = 0.5 * d * dr[(last, i)] / jac;
            let gr = 0.5 * d * dr[(0, i)] / jac;
            k[(left + i, um)] += gl;
            k[(left + i, up)] -= gl;
            k[(right + i, um)] += gr;
            k[(right + i, up)] -= gr;
        }
    }
    // Outlet: total flux v u(L).
    k[(nn - 1, nn - 1)] -= v;

    let minv = &ops.inverse_mass / jac;
    let mut a = DMatrix::zeros(nn, nn);
    for e in 0..ne {
        let o = e * np;
        let rows = minv.clone() * k.rows(o, np);
        a.rows_mut(o, np).copy_from(&rows);
    }
    let mut inlet_gain = DVector::zeros(nn);
    for i in 0..np {
        inlet_gain[i] = minv[(i, 0)] * v;
    }
    TransportOperator { a, inlet_gain }
}

/// An [`AdrSystem`] discretized on a [`Mesh1D`]: an ODE `ẋ = f(t, x, p)`.
#[derive(Debug, Clone)]
pub struct SemiDiscreteSystem {
    system: AdrSystem,
    mesh: Mesh1D,
    ops: DgOperators,
    transport: Vec<Option<TransportOperator>>,
    inlet_slot: Vec<Option<usize>>,
}

/// Discretizes `system` on `mesh`. Fails if the system does not validate.
pub fn semidiscretize(system: AdrSystem, mesh: Mesh1D) -> Result<SemiDiscreteSystem> {
    let report = validate_system(&system);
    if !report.is_empty() {
        let msgs: Vec<String> = report.iter().map(|v| v.to_string()).collect();
        return Err(Error::invalid(format!("invalid ADR system: {}", msgs.join("; "))));
    }
    if (mesh.length - system.length).abs() > 1e-12 * system.length {
        return Err(Error::invalid("mesh length differs from the system domain length"));
    }
    let ops = DgOperators::new(mesh.order);
    let n_c = system.components.len();
    let mut inlet_slot = vec![None; n_c];
    for (slot, i) in system.components.mobile_indices().into_iter().enumerate() {
        inlet_slot[i] = Some(slot);
    }
    let transport = (0..n_c)
        .map(|i| {
            if system.components.is_mobile(i) {
                Some(assemble_transport(
                    &mesh,
                    &ops,
                    system.transport.velocity[i],
                    system.transport.diffusion[i],
                ))
            } else {
                None
            }
        })
        .collect();
    Ok(SemiDiscreteSystem {
        system,
        mesh,
        ops,
        transport,
        inlet_slot,
    })
}

impl SemiDiscreteSystem {
    pub fn system(&self) -> &AdrSystem {
        &self.system
    }

    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn operators(&self) -> &DgOperators {
        &self.ops
    }

    pub fn n_components(&self) -> usize {
        self.system.components.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.node_count()
    }

    pub fn n_states(&self) -> usize {
        self.n_components() * self.n_nodes()
    }

    pub fn n_params(&self) -> usize {
        self.system.kinetics.n_params()
    }

    /// Global state index of component `i` at node `n`.
    pub fn index(&self, component: usize, node: usize) -> usize {
        component * self.n_nodes() + node
    }

    /// Linear transport matrix of a mobile component (`None` when stationary).
    pub fn transport_matrix(&self, component: usize) -> Option<&DMatrix<f64>> {
        self.transport[component].as_ref().map(|t| &t.a)
    }

    /// Discretized initial state.
    pub fn initial_state(&self) -> Vec<f64> {
        let coords = self.mesh.coordinates();
        let mut x = vec![0.0; self.n_states()];
        for (n, &z) in coords.iter().enumerate() {
            let c0 = self.system.initial.at(z);
            for (i, v) in c0.into_iter().enumerate() {
                x[self.index(i, n)] = v;
            }
        }
        x
    }

    /// Per-node quadrature weights: `∫₀ᴸ u_h dz = Σ_n w_n u_n`.
    pub fn mass_weights(&self) -> Vec<f64> {
        let jac = 0.5 * self.mesh.element_width();
        let np = self.mesh.nodes_per_element();
        let local: Vec<f64> = (0..np)
            .map(|i| jac * self.ops.mass.row(i).sum())
            .collect();
        (0..self.mesh.element_count)
            .flat_map(|_| local.iter().copied())
            .collect()
    }

    /// Evaluates one component's DG polynomial at `z ∈ [0, L]`.
    pub fn evaluate_at(&self, x: &[f64], component: usize, z: f64) -> f64 {
        let h = self.mesh.element_width();
        let np = self.mesh.nodes_per_element();
        let e = ((z / h).floor() as usize).min(self.mesh.element_count - 1);
        let r = 2.0 * (z - self.mesh.boundaries[e]) / h - 1.0;
        let basis = self.ops.basis_at(r);
        let o = self.index(component, e * np);
        (0..np).map(|j| basis[j] * x[o + j]).sum()
    }

    pub fn unpack(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_len(x)?;
        Ok(x.chunks(self.n_nodes()).map(|c| c.to_vec()).collect())
    }

    pub fn pack(&self, fields: &[Vec<f64>]) -> Result<Vec<f64>> {
        if fields.len() != self.n_components() || fields.iter().any(|f| f.len() != self.n_nodes()) {
            return Err(Error::invalid("pack: field shape does not match the state layout"));
        }
        Ok(fields.concat())
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_states() {
            return Err(Error::invalid(format!(
                "state has dimension {}, expected {}",
                x.len(),
                self.n_states()
            )));
        }
        Ok(())
    }

    /// Mobile-component concentrations at `z = L` (last node of last element).
    pub fn evaluate_outlet(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let last = self.n_nodes() - 1;
        Ok(self
            .system
            .components
            .mobile_indices()
            .into_iter()
            .map(|i| x[self.index(i, last)])
            .collect())
    }

    /// State indices of the outlet nodes of every mobile component.
    pub fn outlet_indices(&self) -> Vec<usize> {
        let last = self.n_nodes() - 1;
        self.system
            .components
            .mobile_indices()
            .into_iter()
            .map(|i| self.index(i, last))
            .collect()
    }

    fn node_state(&self, x: &[f64], node: usize, c: &mut [f64]) {
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = x[self.index(i, node)];
        }
    }

    /// Transport part of `f` (no kinetics), including the inlet flux.
    pub fn transport_rhs(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let nn = self.n_nodes();
        let mut inlet = vec![0.0; self.system.inlet.width()];
        self.system.inlet.evaluate_into(t, &mut inlet);
        for (i, op) in self.transport.iter().enumerate() {
            let o = i * nn;
            match op {
                None => out[o..o + nn].fill(0.0),
                Some(op) => {
                    let cin = inlet[self.inlet_slot[i].expect("mobile components have an inlet")];
                    let xi = &x[o..o + nn];
                    for r in 0..nn {
                        let mut acc = op.inlet_gain[r] * cin;
                        for (c, xv) in xi.iter().enumerate() {
                            acc += op.a[(r, c)] * xv;
                        }
                        out[o + r] = acc;
                    }
                }
            }
        }
    }

    /// `f(t, x, p)`.
    pub fn rhs(&self, t: f64, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len(x)?;
        self.transport_rhs(t, x, out);
        let kin = &self.system.kinetics;
        let n_r = kin.stoich.nrows();
        if n_r == 0 {
            return Ok(());
        }
        let n_c = self.n_components();
        let mut c = vec![0.0; n_c];
        let mut r = vec![0.0; n_r];
        for node in 0..self.n_nodes() {
            self.node_state(x, node, &mut c);
            kin.law.rates(&c, p, &mut r).map_err(|e| at_time(e, t))?;
            for (k, rk) in r.iter().enumerate() {
                if !rk.is_finite() {
                    return Err(Error::Simulation {
                        t,
                        message: format!("non-finite rate at node {node}, state {c:?}"),
                    });
                }
                for i in 0..n_c {
                    let s = kin.stoich[(k, i)];
                    if s != 0.0 {
                        out[self.index(i, node)] += s * rk;
                    }
                }
            }
        }
        Ok(())
    }

    /// `∂f/∂x`, dense `n_x × n_x`.
    pub fn jac_x(&self, t: f64, x: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        self.check_len(x)?;
        out.fill(0.0);
        let nn = self.n_nodes();
        for (i, op) in self.transport.iter().enumerate() {
            if let Some(op) = op {
                out.view_mut((i * nn, i * nn), (nn, nn)).copy_from(&op.a);
            }
        }
        let kin = &self.system.kinetics;
        let n_r = kin.stoich.nrows();
        if n_r == 0 {
            return Ok(());
        }
        let n_c = self.n_components();
        let mut c = vec![0.0; n_c];
        let mut jr = DMatrix::zeros(n_r, n_c);
        let nu_t = kin.stoich.transpose();
        for node in 0..nn {
            self.node_state(x, node, &mut c);
            kin.law.rate_jac_c(&c, p, &mut jr).map_err(|e| at_time(e, t))?;
            let local = &nu_t * &jr;
            for i in 0..n_c {
                for j in 0..n_c {
                    let v = local[(i, j)];
                    if v != 0.0 {
                        out[(self.index(i, node), self.index(j, node))] += v;
                    }
                }
            }
        }
        Ok(())
    }

    /// `∂f/∂p`, dense `n_x × n_p`. Only kinetics depend on parameters.
    pub fn jac_p(&self, t: f64, x: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        self.check_len(x)?;
        out.fill(0.0);
        let kin = &self.system.kinetics;
        let n_r = kin.stoich.nrows();
        let n_p = kin.n_params();
        if n_r == 0 || n_p == 0 {
            return Ok(());
        }
        let n_c = self.n_components();
        let mut c = vec![0.0; n_c];
        let mut jp = DMatrix::zeros(n_r, n_p);
        let nu_t = kin.stoich.transpose();
        for node in 0..self.n_nodes() {
            self.node_state(x, node, &mut c);
            kin.law.rate_jac_p(&c, p, &mut jp).map_err(|e| at_time(e, t))?;
            let local = &nu_t * &jp;
            for i in 0..n_c {
                for q in 0..n_p {
                    out[(self.index(i, node), q)] += local[(i, q)];
                }
            }
        }
        Ok(())
    }

    /// Binds a parameter vector, yielding an [`OdeSystem`].
    pub fn with_params<'a>(&'a self, p: &'a [f64]) -> BoundSystem<'a> {
        BoundSystem { sd: self, p }
    }
}

fn at_time(e: Error, t: f64) -> Error {
    match e {
        Error::Kinetics { message, state } => Error::Simulation {
            t,
            message: format!("{message} (node state {state:?})"),
        },
        other => other,
    }
}

/// A [`SemiDiscreteSystem`] with its parameters fixed.
#[derive(Debug, Clone, Copy)]
pub struct BoundSystem<'a> {
    pub sd: &'a SemiDiscreteSystem,
    pub p: &'a [f64],
}

impl OdeSystem for BoundSystem<'_> {
    fn dim(&self) -> usize {
        self.sd.n_states()
    }
    fn n_params(&self) -> usize {
        self.sd.n_params()
    }
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.sd.rhs(t, x, self.p, out)
    }
    fn jac_x(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        self.sd.jac_x(t, x, self.p, out)
    }
    fn jac_p(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        self.sd.jac_p(t, x, self.p, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adr::*;
    use std::sync::Arc;

    fn single(v: f64, d: f64, cin: f64, c0: f64, length: f64) -> AdrSystem {
        let components = ComponentSet::new([("c", Mobility::Mobile)]).unwrap();
        AdrSystem {
            length,
            transport: TransportCoefficients::uniform(&components, v, d),
            kinetics: StoichiometricKinetics::none(1),
            inlet: InletProgram::constant(vec![cin]).unwrap(),
            initial: InitialProfile::Uniform(vec![c0]),
            components,
        }
    }

    #[test]
    fn lgl_nodes_known_values() {
        assert_eq!(lgl_nodes(1), vec![-1.0, 1.0]);
        let n2 = lgl_nodes(2);
        assert!(n2[1].abs() < 1e-15);
        let n3 = lgl_nodes(3);
        assert!((n3[2] - (1.0f64 / 5.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn mesh_examples() {
        let m = build_mesh(1.0, 1, 1).unwrap();
        assert_eq!(m.coordinates(), vec![0.0, 1.0]);
        let m = build_mesh(192.0, 5, 3).unwrap();
        assert_eq!(m.node_count(), 20);
        assert!((m.element_width() - 38.4).abs() < 1e-12);
        let m = build_mesh(2.0, 2, 2).unwrap();
        assert!((m.nodes[0][1] - 0.5).abs() < 1e-15);
        assert!(build_mesh(0.0, 1, 1).is_err());
        assert!(build_mesh(1.0, 0, 1).is_err());
        assert!(build_mesh(1.0, 1, 0).is_err());
    }

    #[test]
    fn differentiation_annihilates_constants() {
        for p in 1..=6 {
            let ops = DgOperators::new(p);
            for i in 0..=p {
                assert!(ops.differentiation.row(i).sum().abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_inlet_state_is_steady() {
        let v = 0.7702;
        let c = 2.5;
        let sd = semidiscretize(single(v, 9.56e-2, c, c, 192.0), build_mesh(192.0, 5, 3).unwrap()).unwrap();
        let x = sd.initial_state();
        let mut f = vec![0.0; x.len()];
        sd.rhs(0.0, &x, &[], &mut f).unwrap();
        let fmax = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(fmax <= 1e-12 * v * c, "{fmax}");
    }

    #[test]
    fn linear_profile_pure_advection() {
        let length = 4.0;
        let sd = semidiscretize(single(1.0, 0.0, 0.0, 0.0, length), build_mesh(length, 4, 2).unwrap()).unwrap();
        let coords = sd.mesh().coordinates();
        let x: Vec<f64> = coords.clone();
        let mut f = vec![0.0; x.len()];
        sd.rhs(0.0, &x, &[], &mut f).unwrap();
        // Interior elements see continuous data, so the upwind flux is exact.
        for e in 1..3 {
            for i in 0..3 {
                assert!((f[e * 3 + i] + 1.0).abs() < 1e-12, "{:?}", f);
            }
        }
    }

    #[test]
    fn first_order_kinetics_jacobian_is_constant() {
        let components =
            ComponentSet::new([("c", Mobility::Mobile), ("q", Mobility::Stationary)]).unwrap();
        let system = AdrSystem {
            length: 1.0,
            transport: TransportCoefficients::uniform(&components, 1.0, 0.01),
            kinetics: StoichiometricKinetics {
                stoich: DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]),
                law: Arc::new(FirstOrderRates {
                    n_components: 2,
                    species: vec![0],
                }),
            },
            inlet: InletProgram::constant(vec![1.0]).unwrap(),
            initial: InitialProfile::Uniform(vec![0.0, 0.0]),
            components,
        };
        let sd = semidiscretize(system, build_mesh(1.0, 3, 2).unwrap()).unwrap();
        let n = sd.n_states();
        let mut j1 = DMatrix::zeros(n, n);
        let mut j2 = DMatrix::zeros(n, n);
        let x1 = vec![0.3; n];
        let x2: Vec<f64> = (0..n).map(|i| i as f64).collect();
        sd.jac_x(0.0, &x1, &[2.0], &mut j1).unwrap();
        sd.jac_x(0.0, &x2, &[2.0], &mut j2).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn zero_kinetics_have_zero_parameter_jacobian() {
        let sd = semidiscretize(single(1.0, 0.1, 1.0, 0.0, 1.0), build_mesh(1.0, 2, 2).unwrap()).unwrap();
        let mut jp = DMatrix::zeros(sd.n_states(), 0);
        sd.jac_p(0.0, &sd.initial_state(), &[], &mut jp).unwrap();
        assert_eq!(jp.len(), 0);
    }

    #[test]
    fn outlet_and_layout() {
        let components = ComponentSet::new([
            ("a", Mobility::Mobile),
            ("b", Mobility::Mobile),
            ("c", Mobility::Mobile),
            ("d", Mobility::Mobile),
        ])
        .unwrap();
        let system = AdrSystem {
            length: 1.0,
            transport: TransportCoefficients::uniform(&components, 1.0, 0.1),
            kinetics: StoichiometricKinetics::none(4),
            inlet: InletProgram::constant(vec![0.0; 4]).unwrap(),
            initial: InitialProfile::Uniform(vec![0.0; 4]),
            components,
        };
        let sd = semidiscretize(system, build_mesh(1.0, 2, 3).unwrap()).unwrap();
        let mut x = vec![0.0; sd.n_states()];
        x[sd.index(0, sd.n_nodes() - 1)] = 0.1;
        assert_eq!(sd.evaluate_outlet(&x).unwrap(), vec![0.1, 0.0, 0.0, 0.0]);
        let y: Vec<f64> = (0..sd.n_states()).map(|i| i as f64 * 0.5).collect();
        assert_eq!(sd.pack(&sd.unpack(&y).unwrap()).unwrap(), y);
        assert!(sd.evaluate_outlet(&y[1..]).is_err());

        let cst = vec![0.7; sd.n_states()];
        assert_eq!(sd.evaluate_outlet(&cst).unwrap(), vec![0.7; 4]);
    }

    #[test]
    fn mass_weights_integrate_exactly() {
        let sd = semidiscretize(single(1.0, 0.1, 0.0, 0.0, 3.0), build_mesh(3.0, 3, 3).unwrap()).unwrap();
        let w = sd.mass_weights();
        let coords = sd.mesh().coordinates();
        let integral: f64 = w.iter().zip(&coords).map(|(w, z)| w * z * z).sum();
        assert!((integral - 9.0).abs() < 1e-12);
    }
}
