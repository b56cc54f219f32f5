//! Landmark configurations, the Gaussian kernel, the landmark Hamiltonian
//! `H(p, q) = ½ Σᵢⱼ pᵢᵀpⱼ G(qᵢ, qⱼ)` with its derivatives, and sampling of
//! momenta from the Gibbs conditional `N(0, (β𝒢(q))⁻¹ ⊗ I_d)`.
//!
//! Coordinates are stored landmark-major: `[q₁ₓ, q₁ᵧ, q₂ₓ, …]`. Kronecker
//! products `𝒢 ⊗ I_d` are applied blockwise and never formed for matvecs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, RngStream};

/// `N` landmarks in `ℝᵈ`, flattened to a vector of length `d·N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkConfig {
    dim: usize,
    coords: DVector<f64>,
}

impl LandmarkConfig {
    pub fn new(dim: usize, coords: impl Into<DVector<f64>>) -> Result<Self> {
        let coords = coords.into();
        if dim == 0 {
            return Err(Error::InvalidParameter("spatial dimension must be positive".into()));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not form points in {dim} dimensions",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark coordinates"));
        }
        Ok(LandmarkConfig { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch("points of differing dimension".into()));
        }
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        LandmarkConfig::new(dim, DVector::from_vec(flat))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords.as_slice()[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.count()).map(|i| self.point(i).to_vec()).collect()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.count() {
            for j in (i + 1)..self.count() {
                best = best.min(dist_sq(self.point(i), self.point(j)).sqrt());
            }
        }
        best
    }
}

/// Phase-space point `z = [p, q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub dim: usize,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl PhaseState {
    pub fn new(dim: usize, p: DVector<f64>, q: DVector<f64>) -> Result<Self> {
        if dim == 0 || p.len() != q.len() || !q.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "momentum length {} and position length {} in dimension {dim}",
                p.len(),
                q.len()
            )));
        }
        Ok(PhaseState { dim, p, q })
    }

    pub fn at_rest(q: &LandmarkConfig) -> Self {
        PhaseState { dim: q.dim(), p: DVector::zeros(q.coords().len()), q: q.coords().clone() }
    }

    pub fn with_momentum(p: DVector<f64>, q: &LandmarkConfig) -> Result<Self> {
        PhaseState::new(q.dim(), p, q.coords().clone())
    }

    pub fn count(&self) -> usize {
        self.q.len() / self.dim
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }

    /// The concatenation `[p, q]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.p.len();
        DVector::from_iterator(2 * n, self.p.iter().chain(self.q.iter()).copied())
    }

    pub fn from_vector(dim: usize, z: &DVector<f64>) -> Self {
        let n = z.len() / 2;
        PhaseState { dim, p: z.rows(0, n).into_owned(), q: z.rows(n, n).into_owned() }
    }

    pub fn positions(&self) -> Result<LandmarkConfig> {
        LandmarkConfig::new(self.dim, self.q.clone())
    }

    /// Time reversal `[p, q] ↦ [−p, q]`.
    pub fn reversed(&self) -> Self {
        PhaseState { dim: self.dim, p: -&self.p, q: self.q.clone() }
    }
}

/// A translation-invariant, symmetric positive-definite kernel.
///
/// Only the first-argument derivatives are required; derivatives in the
/// second argument follow from `∇_y k(x, y) = −∇_x k(x, y)`.
pub trait Kernel: Sync + Send {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64;

    /// Writes `∇_x k(x, y)` into `out` and returns `k(x, y)`.
    fn eval_grad(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> f64;

    /// Writes `∇_x∇_xᵀ k(x, y)` row-major into `out` (length `d²`).
    fn hess(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// Characteristic length over which the kernel decays.
    fn length_scale(&self) -> f64;
}

/// `G(x, y) = exp(−‖x − y‖² / ℓ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    ell: f64,
}

impl GaussianKernel {
    pub fn new(ell: f64) -> Result<Self> {
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(Error::InvalidParameter(format!("length scale must be positive, got {ell}")));
        }
        Ok(GaussianKernel { ell })
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }
}

impl Kernel for GaussianKernel {
    fn length_scale(&self) -> f64 {
        self.ell
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (-dist_sq(x, y) / (self.ell * self.ell)).exp()
    }

    fn eval_grad(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> f64 {
        let inv = 1.0 / (self.ell * self.ell);
        let g = (-dist_sq(x, y) * inv).exp();
        let c = -2.0 * inv * g;
        for a in 0..x.len() {
            out[a] = c * (x[a] - y[a]);
        }
        g
    }

    fn hess(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = x.len();
        let inv = 1.0 / (self.ell * self.ell);
        let g = (-dist_sq(x, y) * inv).exp();
        for a in 0..d {
            for b in 0..d {
                let ra = x[a] - y[a];
                let rb = x[b] - y[b];
                let delta = if a == b { 1.0 } else { 0.0 };
                out[a * d + b] = g * (4.0 * inv * inv * ra * rb - 2.0 * inv * delta);
            }
        }
    }
}

#[inline]
pub(crate) fn dist_sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Inverse temperature β, dissipation λ and diffusion σ tied by σ² = 2λ/β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermostatParams {
    beta: f64,
    lambda: f64,
    sigma: f64,
}

impl ThermostatParams {
    pub fn from_beta_lambda(beta: f64, lambda: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(ThermostatParams { beta, lambda, sigma: (2.0 * lambda / beta).sqrt() })
    }

    /// β is derived as 2λ/σ², so both must be positive.
    pub fn from_lambda_sigma(lambda: f64, sigma: f64) -> Result<Self> {
        if !(lambda > 0.0 && sigma > 0.0 && lambda.is_finite() && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda and sigma must both be positive to fix beta, got {lambda}, {sigma}"
            )));
        }
        Ok(ThermostatParams { beta: 2.0 * lambda / (sigma * sigma), lambda, sigma })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

pub fn kernel_eval<K: Kernel>(x: &[f64], y: &[f64], k: &K) -> f64 {
    k.eval(x, y)
}

/// `𝒢(q)` with entries `G(qᵢ, qⱼ)`; the upper triangle is mirrored from
/// the lower so the result is exactly symmetric.
pub fn kernel_matrix<K: Kernel>(q: &LandmarkConfig, k: &K) -> DMatrix<f64> {
    kernel_matrix_flat(q.dim(), q.coords(), k)
}

pub(crate) fn kernel_matrix_flat<K: Kernel>(dim: usize, q: &DVector<f64>, k: &K) -> DMatrix<f64> {
    let n = q.len() / dim;
    let qs = q.as_slice();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = 1.0;
        for j in 0..i {
            let v = k.eval(&qs[i * dim..(i + 1) * dim], &qs[j * dim..(j + 1) * dim]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Applies `(M ⊗ I_d)` to a landmark-major vector.
pub fn kron_apply(m: &DMatrix<f64>, dim: usize, v: &DVector<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(n * dim);
    for i in 0..n {
        for j in 0..n {
            let c = m[(i, j)];
            if c == 0.0 {
                continue;
            }
            for a in 0..dim {
                out[i * dim + a] += c * v[j * dim + a];
            }
        }
    }
    out
}

/// Materialises `M ⊗ I_d`.
pub fn kron_identity(m: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n * dim, n * dim);
    for i in 0..n {
        for j in 0..n {
            for a in 0..dim {
                out[(i * dim + a, j * dim + a)] = m[(i, j)];
            }
        }
    }
    out
}

pub fn hamiltonian<K: Kernel>(z: &PhaseState, k: &K) -> f64 {
    let d = z.dim;
    let n = z.count();
    let (p, q) = (z.p.as_slice(), z.q.as_slice());
    let mut h = 0.0;
    for i in 0..n {
        let pi = &p[i * d..(i + 1) * d];
        h += 0.5 * dot(pi, pi);
        for j in 0..i {
            let pj = &p[j * d..(j + 1) * d];
            h += dot(pi, pj) * k.eval(&q[i * d..(i + 1) * d], &q[j * d..(j + 1) * d]);
        }
    }
    h
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(∇_p H, ∇_q H)`.
///
/// `∇_{qᵢ} H = Σⱼ (pᵢᵀpⱼ) ∇_x G(qᵢ, qⱼ)`; pair contributions are added with
/// opposite signs, so `Σᵢ ∇_{qᵢ} H` vanishes up to rounding.
pub fn grad_hamiltonian<K: Kernel>(z: &PhaseState, k: &K) -> (DVector<f64>, DVector<f64>) {
    let d = z.dim;
    let n = z.count();
    let (p, q) = (z.p.as_slice(), z.q.as_slice());
    let mut gp = z.p.clone();
    let mut gq = DVector::zeros(n * d);
    let mut grad = vec![0.0; d];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let pi = &p[i * d..(i + 1) * d];
        for j in 0..i {
            let qj = &q[j * d..(j + 1) * d];
            let pj = &p[j * d..(j + 1) * d];
            let g = k.eval_grad(qi, qj, &mut grad);
            let pp = dot(pi, pj);
            for a in 0..d {
                gp[i * d + a] += g * pj[a];
                gp[j * d + a] += g * pi[a];
                gq[i * d + a] += pp * grad[a];
                gq[j * d + a] -= pp * grad[a];
            }
        }
    }
    (gp, gq)
}

/// Second derivatives of `H`, blocks indexed as `∂²H/∂u∂v` with
/// `pq[(r, c)] = ∂²H/∂p_r∂q_c`.
#[derive(Debug, Clone)]
pub struct HamiltonianHessian {
    pub pp: DMatrix<f64>,
    pub pq: DMatrix<f64>,
    pub qq: DMatrix<f64>,
}

impl HamiltonianHessian {
    pub fn qp(&self) -> DMatrix<f64> {
        self.pq.transpose()
    }

    /// The full symmetric `2dN × 2dN` Hessian in `[p, q]` ordering.
    pub fn to_full(&self) -> DMatrix<f64> {
        let m = self.pp.nrows();
        let mut h = DMatrix::zeros(2 * m, 2 * m);
        h.view_mut((0, 0), (m, m)).copy_from(&self.pp);
        h.view_mut((0, m), (m, m)).copy_from(&self.pq);
        h.view_mut((m, 0), (m, m)).copy_from(&self.pq.transpose());
        h.view_mut((m, m), (m, m)).copy_from(&self.qq);
        h
    }
}

pub fn hess_hamiltonian<K: Kernel>(z: &PhaseState, k: &K) -> HamiltonianHessian {
    let d = z.dim;
    let n = z.count();
    let m = n * d;
    let (p, q) = (z.p.as_slice(), z.q.as_slice());
    let mut pp = DMatrix::zeros(m, m);
    let mut pq = DMatrix::zeros(m, m);
    let mut qq = DMatrix::zeros(m, m);
    let mut grad = vec![0.0; d];
    let mut hk = vec![0.0; d * d];

    for i in 0..n {
        for a in 0..d {
            pp[(i * d + a, i * d + a)] = 1.0;
        }
    }
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let pi = &p[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let qj = &q[j * d..(j + 1) * d];
            let pj = &p[j * d..(j + 1) * d];
            let g = k.eval_grad(qi, qj, &mut grad);
            k.hess(qi, qj, &mut hk);
            let pij = dot(pi, pj);
            for a in 0..d {
                pp[(i * d + a, j * d + a)] = g;
                for b in 0..d {
                    // ∂(∇_{pᵢ}H)_a / ∂q_{j,b} and the diagonal block.
                    pq[(i * d + a, j * d + b)] = -pj[a] * grad[b];
                    pq[(i * d + a, i * d + b)] += pj[a] * grad[b];
                    qq[(i * d + a, j * d + b)] = -pij * hk[a * d + b];
                    qq[(i * d + a, i * d + b)] += pij * hk[a * d + b];
                }
            }
        }
    }
    crate::numerics::symmetrize(&mut qq);
    HamiltonianHessian { pp, pq, qq }
}

/// Gibbs conditional momentum covariance `(β𝒢(q))⁻¹ ⊗ I_d`, materialised.
pub fn gibbs_covariance<K: Kernel>(q: &LandmarkConfig, beta: f64, k: &K) -> Result<DMatrix<f64>> {
    let g = kernel_matrix(q, k);
    let chol = cholesky(&g).map_err(|_| Error::SingularKernel)?;
    let n = g.nrows();
    let mut inv = chol.solve_mat(&DMatrix::identity(n, n)) / beta;
    crate::numerics::symmetrize(&mut inv);
    Ok(kron_identity(&inv, q.dim()))
}

/// Draws `p ~ N(0, (β𝒢(q))⁻¹ ⊗ I_d)` by solving `Lᵀ x = ξ/√β` per
/// spatial coordinate, where `𝒢 = L Lᵀ`.
pub fn gibbs_momentum_sample<K: Kernel>(
    q: &LandmarkConfig,
    beta: f64,
    k: &K,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    let g = kernel_matrix(q, k);
    let chol = cholesky(&g).map_err(|_| Error::SingularKernel)?;
    Ok(gibbs_sample_with(&chol, q.dim(), beta, rng))
}

pub(crate) fn gibbs_sample_with(
    chol: &crate::numerics::CholeskyFactor,
    dim: usize,
    beta: f64,
    rng: &mut RngStream,
) -> DVector<f64> {
    let n = chol.dim();
    let scale = 1.0 / beta.sqrt();
    let mut p = DVector::zeros(n * dim);
    for a in 0..dim {
        let xi = rng.gaussian_vector(n) * scale;
        let x = chol.solve_upper(&xi);
        for i in 0..n {
            p[i * dim + a] = x[i];
        }
    }
    p
}
