//! Deterministic Hamiltonian landmark flow `ṗ = −∇_q H`, `q̇ = ∇_p H`,
//! the shooting solution of the two-point landmark problem, and the
//! velocity field / push-forward of the induced diffeomorphism.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{grad_hamiltonian, hamiltonian, kernel_matrix, Kernel, LandmarkConfig, PhaseState};
use crate::numerics::{cholesky, fd_jacobian, FiniteDifference};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    ExplicitEuler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSettings {
    pub integrator: Integrator,
    pub h: f64,
}

impl FlowSettings {
    pub fn new(integrator: Integrator, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {h}")));
        }
        Ok(FlowSettings { integrator, h })
    }

    pub fn rk4(h: f64) -> Result<Self> {
        FlowSettings::new(Integrator::Rk4, h)
    }

    pub fn euler(h: f64) -> Result<Self> {
        FlowSettings::new(Integrator::ExplicitEuler, h)
    }

    /// Number of steps covering `|interval|`; the interval must be an
    /// integer multiple of `h` to within 1e-12 (relative).
    pub fn steps_for(&self, interval: f64) -> Result<usize> {
        let len = interval.abs();
        let n = (len / self.h).round();
        if (n * self.h - len).abs() > 1e-12 * len.max(1.0) {
            return Err(Error::InvalidStep { h: self.h, interval: len });
        }
        Ok(n as usize)
    }
}

/// Phase states on the uniform grid `t_n = t0 + n (t1 − t0)/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    t0: f64,
    t1: f64,
    states: Vec<PhaseState>,
}

impl DiscretePath {
    pub fn new(t0: f64, t1: f64, states: Vec<PhaseState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidParameter("a path needs at least one state".into()));
        }
        if states.len() == 1 && t0 != t1 {
            return Err(Error::InvalidParameter("single-state path must have t0 == t1".into()));
        }
        if let Some(n) = states.iter().position(|s| !s.is_finite()) {
            return Err(Error::IntegrationDiverged { step: n });
        }
        Ok(DiscretePath { t0, t1, states })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Signed step `(t1 − t0)/N`.
    pub fn step(&self) -> f64 {
        if self.n_steps() == 0 {
            0.0
        } else {
            (self.t1 - self.t0) / self.n_steps() as f64
        }
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.step()
    }

    pub fn states(&self) -> &[PhaseState] {
        &self.states
    }

    pub fn state(&self, n: usize) -> &PhaseState {
        &self.states[n]
    }

    pub fn first(&self) -> &PhaseState {
        &self.states[0]
    }

    pub fn last(&self) -> &PhaseState {
        &self.states[self.states.len() - 1]
    }

    pub fn into_states(self) -> Vec<PhaseState> {
        self.states
    }

    /// The same geometric path traversed from `t1` back to `t0`.
    pub fn reversed(&self) -> DiscretePath {
        let mut states = self.states.clone();
        states.reverse();
        DiscretePath { t0: self.t1, t1: self.t0, states }
    }

    /// Index of the grid node nearest to `t`.
    pub fn nearest_node(&self, t: f64) -> Result<usize> {
        let (lo, hi) = (self.t0.min(self.t1), self.t0.max(self.t1));
        let slack = 1e-12 * (hi - lo).abs().max(1.0);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        if self.n_steps() == 0 {
            return Ok(0);
        }
        let x = ((t - self.t0) / self.step()).round();
        Ok((x.max(0.0) as usize).min(self.n_steps()))
    }
}

/// Hamiltonian vector field `(−∇_q H, ∇_p H)`.
pub fn hamiltonian_field<K: Kernel>(z: &PhaseState, k: &K) -> (DVector<f64>, DVector<f64>) {
    let (gp, gq) = grad_hamiltonian(z, k);
    (-gq, gp)
}

fn step_state<K: Kernel>(z: &PhaseState, h: f64, integrator: Integrator, k: &K) -> PhaseState {
    let d = z.dim;
    let shifted = |base: &PhaseState, dp: &DVector<f64>, dq: &DVector<f64>, s: f64| PhaseState {
        dim: d,
        p: &base.p + dp * s,
        q: &base.q + dq * s,
    };
    match integrator {
        Integrator::ExplicitEuler => {
            let (dp, dq) = hamiltonian_field(z, k);
            shifted(z, &dp, &dq, h)
        }
        Integrator::Rk4 => {
            let (k1p, k1q) = hamiltonian_field(z, k);
            let (k2p, k2q) = hamiltonian_field(&shifted(z, &k1p, &k1q, 0.5 * h), k);
            let (k3p, k3q) = hamiltonian_field(&shifted(z, &k2p, &k2q, 0.5 * h), k);
            let (k4p, k4q) = hamiltonian_field(&shifted(z, &k3p, &k3q, h), k);
            let dp = (k1p + k2p * 2.0 + k3p * 2.0 + k4p) / 6.0;
            let dq = (k1q + k2q * 2.0 + k3q * 2.0 + k4q) / 6.0;
            shifted(z, &dp, &dq, h)
        }
    }
}

/// Integrates from `t_from` to `t_to`. A backward interval integrates the
/// negated field on a forward grid of the same step count.
pub fn flow<K: Kernel>(z0: &PhaseState, t_from: f64, t_to: f64, settings: &FlowSettings, k: &K) -> Result<DiscretePath> {
    let n = settings.steps_for(t_to - t_from)?;
    let mut states = Vec::with_capacity(n + 1);
    states.push(z0.clone());
    if n > 0 {
        let h = (t_to - t_from) / n as f64;
        for step in 0..n {
            let next = step_state(&states[step], h, settings.integrator, k);
            if !next.is_finite() {
                return Err(Error::IntegrationDiverged { step: step + 1 });
            }
            states.push(next);
        }
    }
    DiscretePath::new(t_from, t_to, states)
}

/// Final state of [`flow`] without storing the path.
pub fn flow_end<K: Kernel>(z0: &PhaseState, duration: f64, settings: &FlowSettings, k: &K) -> Result<PhaseState> {
    let n = settings.steps_for(duration)?;
    let mut z = z0.clone();
    if n > 0 {
        let h = duration / n as f64;
        for step in 0..n {
            z = step_state(&z, h, settings.integrator, k);
            if !z.is_finite() {
                return Err(Error::IntegrationDiverged { step: step + 1 });
            }
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShootOptions {
    pub max_iterations: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for ShootOptions {
    fn default() -> Self {
        ShootOptions { max_iterations: 200, armijo_c: 1e-4, backtrack: 0.5, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone)]
pub struct ShootResult {
    pub p0: DVector<f64>,
    pub path: DiscretePath,
    /// `‖S_q(1; 0, [p0, q_r]) − q_t‖`.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Solves the two-point problem `q(0) = q_r`, `q(1) = q_t` for the initial
/// momentum by Gauss–Newton on the endpoint mismatch, starting from zero.
pub fn shoot_register<K: Kernel>(
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    settings: &FlowSettings,
    k: &K,
    tol: f64,
) -> Result<ShootResult> {
    shoot_register_with(q_r, q_t, settings, k, tol, &ShootOptions::default())
}

pub fn shoot_register_with<K: Kernel>(
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    settings: &FlowSettings,
    k: &K,
    tol: f64,
    opts: &ShootOptions,
) -> Result<ShootResult> {
    if q_r.dim() != q_t.dim() || q_r.count() != q_t.count() {
        return Err(Error::DimensionMismatch("reference and target landmark sets differ in shape".into()));
    }
    cholesky(&kernel_matrix(q_r, k)).map_err(|_| Error::SingularKernel)?;
    let dim = q_r.dim();
    let target = q_t.coords();
    let endpoint = |p: &DVector<f64>| -> Result<DVector<f64>> {
        let z0 = PhaseState::new(dim, p.clone(), q_r.coords().clone())?;
        Ok(flow_end(&z0, 1.0, settings, k)?.q)
    };
    let merit = |r: &DVector<f64>| 0.5 * r.norm_squared();

    let mut p = DVector::zeros(q_r.coords().len());
    let mut r = endpoint(&p)? - target;
    let mut iterations = 0;
    while r.norm() > tol && iterations < opts.max_iterations {
        let step = 1e-6 * p.norm().max(1.0);
        let fx = &r + target;
        let jac = fd_jacobian(endpoint, &p, &fx, FiniteDifference::Forward { step })?;
        let grad = jac.transpose() * &r;
        let normal = jac.transpose() * &jac;
        let gn_dir = cholesky(&normal).ok().map(|c| -c.solve(&grad));

        let mut accepted = None;
        for dir in gn_dir.into_iter().chain(std::iter::once(-&grad)) {
            let slope = grad.dot(&dir);
            if !(slope < 0.0) {
                continue;
            }
            let mut alpha = 1.0;
            for _ in 0..opts.max_backtracks {
                let trial = &p + &dir * alpha;
                if let Ok(end) = endpoint(&trial) {
                    let rt = end - target;
                    if merit(&rt) <= merit(&r) + opts.armijo_c * alpha * slope {
                        accepted = Some((trial, rt));
                        break;
                    }
                }
                alpha *= opts.backtrack;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((p_new, r_new)) = accepted else {
            break;
        };
        p = p_new;
        r = r_new;
        iterations += 1;
    }

    let residual = r.norm();
    let path = flow(&PhaseState::new(dim, p.clone(), q_r.coords().clone())?, 0.0, 1.0, settings, k)?;
    Ok(ShootResult { p0: p, path, residual, converged: residual <= tol, iterations })
}

/// `v(x) = Σᵢ pᵢ G(x, qᵢ)` for a fixed phase state.
pub fn velocity_at_state<K: Kernel>(z: &PhaseState, x: &[f64], k: &K) -> Vec<f64> {
    let d = z.dim;
    let mut v = vec![0.0; d];
    for i in 0..z.count() {
        let qi = &z.q.as_slice()[i * d..(i + 1) * d];
        let g = k.eval(x, qi);
        for a in 0..d {
            v[a] += g * z.p[i * d + a];
        }
    }
    v
}

/// Velocity at time `t`, using the path node nearest to `t`.
pub fn velocity_field<K: Kernel>(t: f64, x: &[f64], path: &DiscretePath, k: &K) -> Result<Vec<f64>> {
    let n = path.nearest_node(t)?;
    Ok(velocity_at_state(path.state(n), x, k))
}

fn midpoint_state(a: &PhaseState, b: &PhaseState) -> PhaseState {
    PhaseState { dim: a.dim, p: (&a.p + &b.p) * 0.5, q: (&a.q + &b.q) * 0.5 }
}

fn advance_point<K: Kernel>(path: &DiscretePath, x0: &[f64], integrator: Integrator, k: &K) -> Result<Vec<f64>> {
    let h = path.step();
    let n = path.n_steps();
    let states = path.states();
    let mut x = x0.to_vec();
    let axpy = |x: &[f64], v: &[f64], s: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + s * b).collect() };
    let rk4 = |x: &[f64], za: &PhaseState, zm: &PhaseState, zb: &PhaseState, dt: f64| -> Vec<f64> {
        let k1 = velocity_at_state(za, x, k);
        let k2 = velocity_at_state(zm, &axpy(x, &k1, 0.5 * dt), k);
        let k3 = velocity_at_state(zm, &axpy(x, &k2, 0.5 * dt), k);
        let k4 = velocity_at_state(zb, &axpy(x, &k3, dt), k);
        x.iter()
            .enumerate()
            .map(|(a, xa)| xa + dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]))
            .collect()
    };
    match integrator {
        Integrator::ExplicitEuler => {
            for s in 0..n {
                let v = velocity_at_state(&states[s], &x, k);
                x = axpy(&x, &v, h);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::IntegrationDiverged { step: s + 1 });
                }
            }
        }
        Integrator::Rk4 => {
            // Double steps whose midpoints fall on grid nodes; an odd
            // trailing step uses the averaged neighbouring states.
            let mut s = 0;
            while s + 2 <= n {
                x = rk4(&x, &states[s], &states[s + 1], &states[s + 2], 2.0 * h);
                s += 2;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::IntegrationDiverged { step: s });
                }
            }
            if s < n {
                let mid = midpoint_state(&states[s], &states[s + 1]);
                x = rk4(&x, &states[s], &mid, &states[s + 1], h);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::IntegrationDiverged { step: n });
                }
            }
        }
    }
    Ok(x)
}

/// Transports `points` through `dx/dt = v(t, x)` along the path's own time
/// grid (which may run backwards). `settings` selects the integrator.
pub fn push_forward<K: Kernel>(
    path: &DiscretePath,
    points: &[Vec<f64>],
    settings: &FlowSettings,
    k: &K,
) -> Result<Vec<Vec<f64>>> {
    let d = path.first().dim;
    if points.iter().any(|x| x.len() != d) {
        return Err(Error::DimensionMismatch(format!("points must have dimension {d}")));
    }
    points
        .par_iter()
        .map(|x| advance_point(path, x, settings.integrator, k))
        .collect()
}

/// `∫ H dt` along the path by the trapezoidal rule.
pub fn path_energy<K: Kernel>(path: &DiscretePath, k: &K) -> f64 {
    let hs: Vec<f64> = path.states().iter().map(|z| hamiltonian(z, k)).collect();
    let h = path.step().abs();
    hs.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum()
}
