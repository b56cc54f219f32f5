//! Gaussian prior from the Langevin dynamics linearised about a Hamiltonian
//! path `ẑ`: `z = ẑ + δ`, with `δ` following the linear Euler–Maruyama
//! recursion forward and backward from `t = ½`. The joint law of
//! `δ₀, …, δ_{N_h}` is assembled densely and conditioned on noisy
//! observations of both endpoint landmark sets.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::DiscretePath;
use crate::kernel::{gibbs_covariance, grad_hamiltonian, hess_hamiltonian, Kernel, PhaseState, ThermostatParams};
use crate::numerics::{cholesky, mirror_lower, psd_project, symmetrize, PsdMode, RngStream};

/// Default byte budget for the dense joint covariance (2 GiB).
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

/// Fraction of the trace that PSD clipping may remove before a warning.
const CLIP_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch("covariance shape does not match mean".into()));
        }
        Ok(GaussianDist { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn point_mass(mean: DVector<f64>) -> Self {
        let n = mean.len();
        GaussianDist { mean, cov: DMatrix::zeros(n, n) }
    }

    /// Marginal over the contiguous index range `start..start + len`.
    pub fn marginal(&self, start: usize, len: usize) -> GaussianDist {
        GaussianDist {
            mean: self.mean.rows(start, len).into_owned(),
            cov: self.cov.view((start, start), (len, len)).into_owned(),
        }
    }
}

/// Per-node linear maps of the perturbation recursion about `base_path`.
///
/// Node `n` holds `M⁺ₙ = I + h B⁺(tₙ)`, used from `n` to `n + 1`, and
/// `M⁻ₙ = I − h B⁻(tₙ)`, used from `n` to `n − 1`, together with the common
/// drift `Aₙ = −hλ (∇_p H(ẑₙ), 0)`.
#[derive(Debug, Clone)]
pub struct LinearisedSystem {
    base_path: DiscretePath,
    thermostat: ThermostatParams,
    b_plus: Vec<DMatrix<f64>>,
    b_minus: Vec<DMatrix<f64>>,
    drift: Vec<DVector<f64>>,
}

/// `[[s·Hpp − Hqp, s·Hpq − Hqq], [Hpp, Hpq]]`.
fn b_matrix(hess: &crate::kernel::HamiltonianHessian, s: f64) -> DMatrix<f64> {
    let m = hess.pp.nrows();
    let mut b = DMatrix::zeros(2 * m, 2 * m);
    b.view_mut((0, 0), (m, m)).copy_from(&(&hess.pp * s - hess.qp()));
    b.view_mut((0, m), (m, m)).copy_from(&(&hess.pq * s - &hess.qq));
    b.view_mut((m, 0), (m, m)).copy_from(&hess.pp);
    b.view_mut((m, m), (m, m)).copy_from(&hess.pq);
    b
}

/// Assembles the linearised system about a path over `[0, 1]` whose
/// midpoint is a grid node.
pub fn linearise_about<K: Kernel>(base_path: &DiscretePath, th: &ThermostatParams, k: &K) -> Result<LinearisedSystem> {
    if base_path.t0() != 0.0 || base_path.t1() != 1.0 {
        return Err(Error::InvalidParameter("base path must run over [0, 1]".into()));
    }
    if base_path.n_steps() == 0 || !base_path.n_steps().is_multiple_of(2) {
        return Err(Error::InvalidStep { h: base_path.step(), interval: 0.5 });
    }
    let h = base_path.step();
    let lambda = th.lambda();
    let per_node: Vec<_> = base_path
        .states()
        .par_iter()
        .map(|z| {
            let hess = hess_hamiltonian(z, k);
            let (gp, _) = grad_hamiltonian(z, k);
            let mut a = DVector::zeros(2 * gp.len());
            a.rows_mut(0, gp.len()).copy_from(&(gp * (-h * lambda)));
            (b_matrix(&hess, -lambda), b_matrix(&hess, lambda), a)
        })
        .collect();
    let mut b_plus = Vec::with_capacity(per_node.len());
    let mut b_minus = Vec::with_capacity(per_node.len());
    let mut drift = Vec::with_capacity(per_node.len());
    for (bp, bm, a) in per_node {
        b_plus.push(bp);
        b_minus.push(bm);
        drift.push(a);
    }
    Ok(LinearisedSystem { base_path: base_path.clone(), thermostat: *th, b_plus, b_minus, drift })
}

impl LinearisedSystem {
    pub fn base_path(&self) -> &DiscretePath {
        &self.base_path
    }

    pub fn thermostat(&self) -> &ThermostatParams {
        &self.thermostat
    }

    pub fn n_steps(&self) -> usize {
        self.base_path.n_steps()
    }

    pub fn midpoint(&self) -> usize {
        self.n_steps() / 2
    }

    pub fn h(&self) -> f64 {
        self.base_path.step()
    }

    pub fn dim(&self) -> usize {
        self.base_path.first().dim
    }

    /// `2dN`, the length of one phase-space perturbation.
    pub fn state_dim(&self) -> usize {
        2 * self.base_path.first().p.len()
    }

    /// Length of the joint vector `[δ₀, …, δ_{N_h}]`.
    pub fn joint_dim(&self) -> usize {
        (self.n_steps() + 1) * self.state_dim()
    }

    pub fn b_plus(&self, n: usize) -> &DMatrix<f64> {
        &self.b_plus[n]
    }

    pub fn b_minus(&self, n: usize) -> &DMatrix<f64> {
        &self.b_minus[n]
    }

    pub fn m_plus(&self, n: usize) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim(), self.state_dim()) + &self.b_plus[n] * self.h()
    }

    pub fn m_minus(&self, n: usize) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim(), self.state_dim()) - &self.b_minus[n] * self.h()
    }

    pub fn drift(&self, n: usize) -> &DVector<f64> {
        &self.drift[n]
    }

    /// Per-step noise covariance `σ² h · blockdiag(I, 0)`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        let s = self.state_dim();
        let mut q = DMatrix::zeros(s, s);
        let v = self.thermostat.sigma().powi(2) * self.h();
        for i in 0..s / 2 {
            q[(i, i)] = v;
        }
        q
    }

    /// Offset of the position block of node `n` in the joint vector.
    pub fn q_offset(&self, n: usize) -> usize {
        n * self.state_dim() + self.state_dim() / 2
    }

    /// Offset of the momentum block of node `n` in the joint vector.
    pub fn p_offset(&self, n: usize) -> usize {
        n * self.state_dim()
    }

    /// `N(0, blockdiag((β𝒢(q̂(½)))⁻¹ ⊗ I, δ² I))` at the midpoint.
    pub fn midpoint_init<K: Kernel>(&self, delta2: f64, k: &K) -> Result<GaussianDist> {
        if !(delta2 >= 0.0 && delta2.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta2 must be non-negative, got {delta2}")));
        }
        let mid = self.base_path.state(self.midpoint());
        let c = gibbs_covariance(&mid.positions()?, self.thermostat.beta(), k)?;
        let m = c.nrows();
        let mut cov = DMatrix::zeros(2 * m, 2 * m);
        cov.view_mut((0, 0), (m, m)).copy_from(&c);
        for i in m..2 * m {
            cov[(i, i)] = delta2;
        }
        Ok(GaussianDist { mean: DVector::zeros(2 * m), cov })
    }

    /// Joint mean and covariance of `[δ₀, …, δ_{N_h}]` started from `init`
    /// at the midpoint, using the default memory budget.
    pub fn propagate_moments(&self, init: &GaussianDist) -> Result<GaussianDist> {
        self.propagate_moments_with_budget(init, DEFAULT_MEMORY_BUDGET)
    }

    pub fn propagate_moments_with_budget(&self, init: &GaussianDist, budget: usize) -> Result<GaussianDist> {
        let s = self.state_dim();
        if init.dim() != s {
            return Err(Error::DimensionMismatch(format!("initial distribution must have dimension {s}")));
        }
        let total = self.joint_dim();
        let required = total.saturating_mul(total).saturating_mul(std::mem::size_of::<f64>());
        if required > budget {
            return Err(Error::MemoryBudget { required, budget });
        }
        let nh = self.n_steps();
        let m = self.midpoint();
        let noise = self.noise_cov();
        let m_plus: Vec<Option<DMatrix<f64>>> = (0..=nh).map(|n| (n >= m && n < nh).then(|| self.m_plus(n))).collect();
        let m_minus: Vec<Option<DMatrix<f64>>> = (0..=nh).map(|n| (n >= 1 && n <= m).then(|| self.m_minus(n))).collect();
        let fwd = |n: usize| m_plus[n].as_ref().expect("forward map outside forward half");
        let bwd = |n: usize| m_minus[n].as_ref().expect("backward map outside backward half");

        let mut mean = DVector::zeros(total);
        mean.rows_mut(m * s, s).copy_from(&init.mean);
        let mut cov = DMatrix::zeros(total, total);
        let mut init_cov = init.cov.clone();
        symmetrize(&mut init_cov);
        cov.view_mut((m * s, m * s), (s, s)).copy_from(&init_cov);
        let block = |cov: &DMatrix<f64>, r: usize, c: usize| cov.view((r * s, c * s), (s, s)).into_owned();

        for n in m..nh {
            let mu = fwd(n) * mean.rows(n * s, s) + &self.drift[n];
            mean.rows_mut((n + 1) * s, s).copy_from(&mu);
            let mut d = fwd(n) * block(&cov, n, n) * fwd(n).transpose() + &noise;
            symmetrize(&mut d);
            cov.view_mut(((n + 1) * s, (n + 1) * s), (s, s)).copy_from(&d);
        }
        for n in (1..=m).rev() {
            let mu = bwd(n) * mean.rows(n * s, s) + &self.drift[n];
            mean.rows_mut((n - 1) * s, s).copy_from(&mu);
            let mut d = bwd(n) * block(&cov, n, n) * bwd(n).transpose() + &noise;
            symmetrize(&mut d);
            cov.view_mut(((n - 1) * s, (n - 1) * s), (s, s)).copy_from(&d);
        }

        // Blocks (r, c) with r > c are filled, then mirrored.
        for c in m..=nh {
            for r in (c + 1)..=nh {
                let b = fwd(r - 1) * block(&cov, r - 1, c);
                cov.view_mut((r * s, c * s), (s, s)).copy_from(&b);
            }
        }
        // Backward half: Cov(δ_r, δ_c) = M⁻_{r+1} Cov(δ_{r+1}, δ_c) for r < c ≤ m,
        // stored as its transpose in the lower triangle (row c, column r).
        for c in (0..=m).rev() {
            for r in (0..c).rev() {
                let upper = bwd(r + 1) * block(&cov, c, r + 1).transpose();
                cov.view_mut((c * s, r * s), (s, s)).copy_from(&upper.transpose());
            }
        }
        // Across the midpoint: r < m < c, starting from Cov(δ_m, δ_c).
        for c in (m + 1)..=nh {
            for r in (0..m).rev() {
                let upper = bwd(r + 1) * block(&cov, c, r + 1).transpose();
                cov.view_mut((c * s, r * s), (s, s)).copy_from(&upper.transpose());
            }
        }
        mirror_lower(&mut cov);
        Ok(GaussianDist { mean, cov })
    }

    /// Conditions the joint law of the perturbations on
    /// `y = (q̂₀ + δq₀, q̂_{N_h} + δq_{N_h}) + η`, `η ~ N(0, δ²_obs I)`.
    pub fn condition_on_endpoints(
        &self,
        joint: &GaussianDist,
        obs_r: &DVector<f64>,
        obs_t: &DVector<f64>,
        delta2_obs: f64,
    ) -> Result<GaussianDist> {
        let dn = self.state_dim() / 2;
        if obs_r.len() != dn || obs_t.len() != dn {
            return Err(Error::DimensionMismatch(format!("observations must have length {dn}")));
        }
        if joint.dim() != self.joint_dim() {
            return Err(Error::DimensionMismatch("joint distribution does not match the system".into()));
        }
        if !(delta2_obs > 0.0) {
            return Err(Error::InvalidParameter(format!("observation variance must be positive, got {delta2_obs}")));
        }
        let idx: Vec<usize> = (0..dn)
            .map(|i| self.q_offset(0) + i)
            .chain((0..dn).map(|i| self.q_offset(self.n_steps()) + i))
            .collect();
        let total = joint.dim();
        let base = &self.base_path;

        let mut c22 = DMatrix::from_fn(2 * dn, 2 * dn, |a, b| joint.cov[(idx[a], idx[b])]);
        for a in 0..2 * dn {
            c22[(a, a)] += delta2_obs;
        }
        symmetrize(&mut c22);
        let chol = cholesky(&c22).map_err(|_| Error::IllConditionedObservation)?;
        let c21 = DMatrix::from_fn(2 * dn, total, |a, j| joint.cov[(idx[a], j)]);
        let m2 = DVector::from_fn(2 * dn, |a, _| {
            let base_q = if a < dn { base.first().q[a] } else { base.last().q[a - dn] };
            base_q + joint.mean[idx[a]]
        });
        let mut y = DVector::zeros(2 * dn);
        y.rows_mut(0, dn).copy_from(obs_r);
        y.rows_mut(dn, dn).copy_from(obs_t);

        let w = chol.solve_lower_mat(&c21);
        let innov = chol.solve_lower(&(y - m2));
        let mean = &joint.mean + w.transpose() * innov;
        let mut cov = &joint.cov - w.transpose() * &w;
        symmetrize(&mut cov);
        // Entries against the observed coordinates in cancellation-free form:
        // Cov(X, HX | y) = δ² K and Cov(HX | y) = δ² I − δ⁴ S⁻¹.
        let gain_t = chol.solve_mat(&c21);
        let s_inv = chol.solve_mat(&DMatrix::identity(2 * dn, 2 * dn));
        for (a, &ia) in idx.iter().enumerate() {
            for j in 0..total {
                let v = delta2_obs * gain_t[(a, j)];
                cov[(j, ia)] = v;
                cov[(ia, j)] = v;
            }
        }
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                let eye = if a == b { delta2_obs } else { 0.0 };
                cov[(ia, ib)] = eye - delta2_obs * delta2_obs * 0.5 * (s_inv[(a, b)] + s_inv[(b, a)]);
            }
        }
        Ok(GaussianDist { mean, cov })
    }

    /// Per-landmark standard deviation `sqrt(tr Σᵢ / d)` of the position
    /// perturbation at node `n`.
    pub fn landmark_sd(&self, dist: &GaussianDist, n: usize) -> Vec<f64> {
        let d = self.dim();
        let off = self.q_offset(n);
        (0..self.state_dim() / (2 * d))
            .map(|i| {
                let tr: f64 = (0..d).map(|a| dist.cov[(off + i * d + a, off + i * d + a)]).sum();
                (tr.max(0.0) / d as f64).sqrt()
            })
            .collect()
    }

    /// Adds a joint perturbation vector to the base path.
    pub fn path_from_joint(&self, x: &DVector<f64>) -> Result<DiscretePath> {
        let s = self.state_dim();
        let states = self
            .base_path
            .states()
            .iter()
            .enumerate()
            .map(|(n, z)| {
                let delta = PhaseState::from_vector(z.dim, &x.rows(n * s, s).into_owned());
                PhaseState { dim: z.dim, p: &z.p + delta.p, q: &z.q + delta.q }
            })
            .collect();
        DiscretePath::new(0.0, 1.0, states)
    }

    /// Draws `n` paths `ẑ + δ` with `δ ~ post`. Sample `i` uses stream
    /// `(seed, i)`.
    pub fn sample_posterior_paths(&self, post: &GaussianDist, n: usize, seed: u64) -> Result<Vec<DiscretePath>> {
        let factor = sampling_factor(post)?;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = RngStream::new(seed, i as u64);
                let x = &post.mean + &factor * rng.gaussian_vector(factor.ncols());
                self.path_from_joint(&x)
            })
            .collect()
    }
}

/// A matrix `F` with `F Fᵀ` equal to the covariance, or to its PSD clip
/// when the Cholesky factorisation fails.
pub fn sampling_factor(dist: &GaussianDist) -> Result<DMatrix<f64>> {
    if dist.cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    if dist.cov.amax() == 0.0 {
        return Ok(DMatrix::zeros(dist.dim(), 0));
    }
    if let Ok(chol) = cholesky(&dist.cov) {
        return Ok(chol.l().clone());
    }
    let clipped = psd_project(&dist.cov, PsdMode::Project);
    if clipped.discarded_fraction > CLIP_WARN_FRACTION {
        warn!(
            "inconsistent covariance: PSD clipping removed {:.2}% of the trace",
            100.0 * clipped.discarded_fraction
        );
    }
    let spec = crate::numerics::SpectralDecomp::new(&clipped.matrix);
    let thr = spec.clip_threshold();
    let keep: Vec<usize> = (0..spec.values.len()).filter(|&i| spec.values[i] > thr && spec.values[i] > 0.0).collect();
    let mut f = DMatrix::zeros(dist.dim(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        f.set_column(c, &(spec.vectors.column(i) * spec.values[i].sqrt()));
    }
    Ok(f)
}
