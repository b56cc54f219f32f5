//! Langevin-perturbed landmark dynamics
//! `dP = (−λ∇_p H − ∇_q H) dt + σ dW`, `dQ = ∇_p H dt`:
//! Euler–Maruyama steps in both time directions, midpoint-prior path
//! sampling, exact Ornstein–Uhlenbeck momentum steps and a variant that
//! conserves total momentum.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{push_forward, DiscretePath, FlowSettings};
use crate::kernel::{
    dist_sq, gibbs_sample_with, grad_hamiltonian, kernel_matrix, kernel_matrix_flat, Kernel, LandmarkConfig,
    PhaseState, ThermostatParams,
};
use crate::numerics::{cholesky, RngStream, SpectralDecomp};

/// Initial distribution at `t = ½`: `p ~ N(0, (β𝒢(q*))⁻¹ ⊗ I)`,
/// `q ~ N(q*, δ² I)`.
#[derive(Debug, Clone)]
pub struct MidpointPrior {
    pub q_star: LandmarkConfig,
    pub delta2: f64,
    pub thermostat: ThermostatParams,
}

impl MidpointPrior {
    pub fn new<K: Kernel>(q_star: LandmarkConfig, delta2: f64, thermostat: ThermostatParams, k: &K) -> Result<Self> {
        if !(delta2 > 0.0 && delta2.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta2 must be positive, got {delta2}")));
        }
        cholesky(&kernel_matrix(&q_star, k)).map_err(|_| Error::SingularKernel)?;
        Ok(MidpointPrior { q_star, delta2, thermostat })
    }
}

fn em_step<K: Kernel>(z: &PhaseState, dt: f64, dissipation: f64, th: &ThermostatParams, k: &K, dw: &DVector<f64>) -> PhaseState {
    let (gp, gq) = grad_hamiltonian(z, k);
    let drift = &gp * dissipation - gq;
    PhaseState { dim: z.dim, p: &z.p + drift * dt + dw * th.sigma(), q: &z.q + gp * dt }
}

/// One forward Euler–Maruyama step; `dw ~ N(0, h I)` is supplied by the caller.
pub fn em_step_forward<K: Kernel>(z: &PhaseState, h: f64, th: &ThermostatParams, k: &K, dw: &DVector<f64>) -> PhaseState {
    em_step(z, h, -th.lambda(), th, k, dw)
}

/// Euler–Maruyama step of the time-reversed system, drift
/// `(+λ∇_p H − ∇_q H, ∇_p H)` applied over the signed step `dt`.
///
/// Marching toward decreasing time uses `dt = −h` with `dw ~ N(0, h I)`;
/// the dissipation then still damps momentum while the Hamiltonian part
/// runs backwards.
pub fn em_step_backward<K: Kernel>(z: &PhaseState, dt: f64, th: &ThermostatParams, k: &K, dw: &DVector<f64>) -> PhaseState {
    em_step(z, dt, th.lambda(), th, k, dw)
}

/// Forward Euler–Maruyama path from `t0` using the given increments, one
/// per step, each of variance `h`.
pub fn simulate_forward<K: Kernel>(
    z0: &PhaseState,
    t0: f64,
    h: f64,
    th: &ThermostatParams,
    k: &K,
    increments: &[DVector<f64>],
) -> Result<DiscretePath> {
    let mut states = Vec::with_capacity(increments.len() + 1);
    states.push(z0.clone());
    for (n, dw) in increments.iter().enumerate() {
        let next = em_step_forward(&states[n], h, th, k, dw);
        if !next.is_finite() {
            return Err(Error::IntegrationDiverged { step: n + 1 });
        }
        states.push(next);
    }
    DiscretePath::new(t0, t0 + h * increments.len() as f64, states)
}

/// Forward Langevin path over `[t0, t1]` with increments drawn from `rng`.
pub fn langevin_path<K: Kernel>(
    z0: &PhaseState,
    t0: f64,
    t1: f64,
    h: f64,
    th: &ThermostatParams,
    k: &K,
    rng: &mut RngStream,
) -> Result<DiscretePath> {
    let n = FlowSettings::euler(h)?.steps_for(t1 - t0)?;
    let h = (t1 - t0) / n.max(1) as f64;
    let increments: Vec<DVector<f64>> = (0..n).map(|_| rng.brownian_increment(z0.p.len(), h)).collect();
    let path = simulate_forward(z0, t0, h, th, k, &increments)?;
    DiscretePath::new(t0, t1, path.into_states())
}

fn midpoint_path<K: Kernel>(
    prior: &MidpointPrior,
    chol: &crate::numerics::CholeskyFactor,
    half_steps: usize,
    h: f64,
    k: &K,
    rng: &mut RngStream,
) -> Result<DiscretePath> {
    let dim = prior.q_star.dim();
    let th = &prior.thermostat;
    let p = gibbs_sample_with(chol, dim, th.beta(), rng);
    let q = prior.q_star.coords() + rng.gaussian_vector(p.len()) * prior.delta2.sqrt();
    let mid = PhaseState { dim, p, q };

    let mut backward = Vec::with_capacity(half_steps + 1);
    backward.push(mid.clone());
    for n in 0..half_steps {
        let dw = rng.brownian_increment(mid.p.len(), h);
        let next = em_step_backward(&backward[n], -h, th, k, &dw);
        if !next.is_finite() {
            return Err(Error::IntegrationDiverged { step: half_steps - n - 1 });
        }
        backward.push(next);
    }
    let mut states: Vec<PhaseState> = backward.into_iter().rev().collect();
    for n in 0..half_steps {
        let dw = rng.brownian_increment(mid.p.len(), h);
        let next = em_step_forward(&states[half_steps + n], h, th, k, &dw);
        if !next.is_finite() {
            return Err(Error::IntegrationDiverged { step: half_steps + n + 1 });
        }
        states.push(next);
    }
    DiscretePath::new(0.0, 1.0, states)
}

/// Samples paths over `[0, 1]` from the midpoint prior, marching forward
/// for `t > ½` and with the reversed dynamics for `t < ½`.
///
/// Path `i` draws from stream `(seed, i)`, so results do not depend on the
/// thread count. `1/h` must be an even integer.
pub fn sample_midpoint_paths<K: Kernel>(
    prior: &MidpointPrior,
    n_paths: usize,
    h: f64,
    k: &K,
    seed: u64,
) -> Result<Vec<DiscretePath>> {
    let n = FlowSettings::euler(h)?.steps_for(1.0)?;
    if n % 2 != 0 {
        return Err(Error::InvalidStep { h, interval: 0.5 });
    }
    let h = 1.0 / n as f64;
    let chol = cholesky(&kernel_matrix(&prior.q_star, k)).map_err(|_| Error::SingularKernel)?;
    (0..n_paths)
        .into_par_iter()
        .map(|i| midpoint_path(prior, &chol, n / 2, h, k, &mut RngStream::new(seed, i as u64)))
        .collect()
}

/// Mean operator and covariance of the momentum OU process
/// `dp = −λ𝒢(q₀) p dt + σ dW` over a duration `t`, per spatial coordinate.
#[derive(Debug, Clone)]
pub struct OuTransition {
    /// `e^{−λt𝒢}`.
    pub mean_op: DMatrix<f64>,
    /// `C_t = β⁻¹ 𝒢⁻¹ (I − e^{−2λt𝒢})`.
    pub cov: DMatrix<f64>,
    /// `C_t^{1/2}` (symmetric square root).
    pub cov_sqrt: DMatrix<f64>,
}

impl OuTransition {
    pub fn new<K: Kernel>(q0: &LandmarkConfig, t: f64, th: &ThermostatParams, k: &K) -> Result<Self> {
        let g = kernel_matrix(q0, k);
        cholesky(&g).map_err(|_| Error::SingularKernel)?;
        let spec = SpectralDecomp::new(&g);
        let lt = th.lambda() * t;
        let var = |l: f64| {
            if lt == 0.0 {
                0.0
            } else {
                -(-2.0 * lt * l).exp_m1() / (th.beta() * l)
            }
        };
        Ok(OuTransition {
            mean_op: spec.map(|l| (-lt * l).exp()),
            cov: spec.map(var),
            cov_sqrt: spec.map(|l| var(l).sqrt()),
        })
    }

    pub fn mean(&self, p0: &DVector<f64>, dim: usize) -> DVector<f64> {
        crate::kernel::kron_apply(&self.mean_op, dim, p0)
    }
}

/// Exact draw of the OU momentum step of duration `t` with positions frozen
/// at `q0`.
pub fn ou_exact<K: Kernel>(
    p0: &DVector<f64>,
    q0: &LandmarkConfig,
    t: f64,
    th: &ThermostatParams,
    k: &K,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    if p0.len() != q0.coords().len() {
        return Err(Error::DimensionMismatch("momentum and positions differ in length".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("duration must be non-negative, got {t}")));
    }
    if t == 0.0 || th.lambda() == 0.0 {
        cholesky(&kernel_matrix(q0, k)).map_err(|_| Error::SingularKernel)?;
        return Ok(p0.clone());
    }
    let ou = OuTransition::new(q0, t, th, k)?;
    let d = q0.dim();
    let noise = crate::kernel::kron_apply(&ou.cov_sqrt, d, &rng.gaussian_vector(p0.len()));
    Ok(ou.mean(p0, d) + noise)
}

/// `σ² t`, the small-λ approximation of the OU covariance scale.
pub fn ou_approx_variance(t: f64, th: &ThermostatParams) -> f64 {
    th.sigma() * th.sigma() * t
}

/// Number of unordered landmark pairs, the length of `dw_pairs` in
/// [`em_step_conserving`].
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Euler–Maruyama step of the momentum-conserving variant: dissipation and
/// noise act on each pair `(i, j)` along `q̂ᵢⱼ` only, through the relative
/// velocity `∇_{pᵢ}H − ∇_{pⱼ}H`, so their contributions to `Σ pᵢ` cancel.
///
/// `dw_pairs` holds one scalar increment per pair `i < j` in the order
/// `(0,1), (0,2), …, (1,2), …`; `w` maps pair distance to a weight.
pub fn em_step_conserving<K: Kernel>(
    z: &PhaseState,
    h: f64,
    th: &ThermostatParams,
    k: &K,
    w: impl Fn(f64) -> f64,
    dw_pairs: &[f64],
) -> Result<PhaseState> {
    let n = z.count();
    let d = z.dim;
    if n < 2 {
        return Err(Error::InvalidParameter("the conserving variant needs at least two landmarks".into()));
    }
    if dw_pairs.len() != pair_count(n) {
        return Err(Error::DimensionMismatch(format!("expected {} pair increments", pair_count(n))));
    }
    let (gp, gq) = grad_hamiltonian(z, k);
    let mut p = &z.p - &gq * h;
    let q = &z.q + &gp * h;
    let qs = z.q.as_slice();
    let mut pair = 0;
    let mut unit = vec![0.0; d];
    for i in 0..n {
        for j in (i + 1)..n {
            let (qi, qj) = (&qs[i * d..(i + 1) * d], &qs[j * d..(j + 1) * d]);
            let r = dist_sq(qi, qj).sqrt();
            if !(r > 0.0) {
                return Err(Error::DegeneratePair { i, j });
            }
            for a in 0..d {
                unit[a] = (qi[a] - qj[a]) / r;
            }
            let wij = w(r);
            let rel: f64 = (0..d).map(|a| unit[a] * (gp[i * d + a] - gp[j * d + a])).sum();
            let coef = -th.lambda() * wij * wij * rel * h + th.sigma() * wij * dw_pairs[pair];
            for a in 0..d {
                let c = coef * unit[a];
                p[i * d + a] += c;
                p[j * d + a] -= c;
            }
            pair += 1;
        }
    }
    Ok(PhaseState { dim: d, p, q })
}

/// One warped sample: the Langevin path and the transported points.
#[derive(Debug, Clone)]
pub struct PushforwardSample {
    pub path: DiscretePath,
    pub points: Vec<Vec<f64>>,
}

/// Draws `p(0)` from the Gibbs momentum law at `q_r`, simulates Langevin
/// paths over `[0, 1]` and transports `points` through each induced flow.
/// Sample `i` uses stream `(seed, i)`.
pub fn pushforward_ensemble<K: Kernel>(
    q_r: &LandmarkConfig,
    th: &ThermostatParams,
    k: &K,
    settings: &FlowSettings,
    n_samples: usize,
    points: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<PushforwardSample>> {
    let g = kernel_matrix_flat(q_r.dim(), q_r.coords(), k);
    let chol = cholesky(&g).map_err(|_| Error::SingularKernel)?;
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64);
            let p0 = gibbs_sample_with(&chol, q_r.dim(), th.beta(), &mut rng);
            let z0 = PhaseState::with_momentum(p0, q_r)?;
            let path = langevin_path(&z0, 0.0, 1.0, settings.h, th, k, &mut rng)?;
            let points = push_forward(&path, points, settings, k)?;
            Ok(PushforwardSample { path, points })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{flow_end, FlowSettings};
    use crate::kernel::{hamiltonian, GaussianKernel};

    fn circle(n: usize, radius: f64) -> LandmarkConfig {
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let th = std::f64::consts::TAU * i as f64 / n as f64;
                vec![radius * th.cos(), radius * th.sin()]
            })
            .collect();
        LandmarkConfig::from_points(&pts).unwrap()
    }

    fn random_state(n: usize, rng: &mut RngStream) -> PhaseState {
        let p = DVector::from_iterator(2 * n, (0..2 * n).map(|_| rng.uniform() - 0.5));
        let q = DVector::from_iterator(2 * n, (0..2 * n).map(|_| 2.0 * rng.uniform() - 1.0));
        PhaseState::new(2, p, q).unwrap()
    }

    fn still() -> ThermostatParams {
        ThermostatParams::from_beta_lambda(1.0, 0.0).unwrap()
    }

    #[test]
    fn degenerate_thermostat_is_hamiltonian_euler() {
        let k = GaussianKernel::new(0.5).unwrap();
        let mut rng = RngStream::new(1, 0);
        let z = random_state(3, &mut rng);
        let dw = rng.gaussian_vector(6);
        let euler = flow_end(&z, 0.01, &FlowSettings::euler(0.01).unwrap(), &k).unwrap();
        let fwd = em_step_forward(&z, 0.01, &still(), &k, &dw);
        let bwd = em_step_backward(&z, 0.01, &still(), &k, &dw);
        assert!((fwd.to_vector() - euler.to_vector()).amax() < 1e-15);
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn single_landmark_at_rest_stays() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(25.0, 0.1).unwrap();
        let z = PhaseState::at_rest(&LandmarkConfig::from_points(&[vec![0.3, 0.4]]).unwrap());
        let next = em_step_forward(&z, 0.1, &th, &k, &DVector::zeros(2));
        assert_eq!(next, z);
    }

    #[test]
    fn forward_backward_drift_difference() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(10.0, 0.3).unwrap();
        let mut rng = RngStream::new(2, 0);
        let z = random_state(4, &mut rng);
        let h = 0.05;
        let zero = DVector::zeros(8);
        let fwd = em_step_forward(&z, h, &th, &k, &zero);
        let bwd = em_step_backward(&z, h, &th, &k, &zero);
        let (gp, _) = grad_hamiltonian(&z, &k);
        assert!((bwd.p - fwd.p - gp * (2.0 * th.lambda() * h)).amax() < 1e-14);
        assert_eq!(fwd.q, bwd.q);
    }

    #[test]
    fn positions_ignore_noise() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(5.0, 0.5).unwrap();
        let mut rng = RngStream::new(3, 0);
        let z = random_state(4, &mut rng);
        let dw = rng.gaussian_vector(8);
        let zero = DVector::zeros(8);
        assert_eq!(em_step_forward(&z, 0.1, &th, &k, &dw).q, em_step_forward(&z, 0.1, &th, &k, &zero).q);
        assert_eq!(em_step_backward(&z, -0.1, &th, &k, &dw).q, em_step_backward(&z, -0.1, &th, &k, &zero).q);
    }

    #[test]
    fn thermostat_constructors_agree_bitwise() {
        let k = GaussianKernel::new(0.5).unwrap();
        let (beta, lambda) = (25.0, 0.1);
        let a = ThermostatParams::from_beta_lambda(beta, lambda).unwrap();
        let b = ThermostatParams::from_lambda_sigma(lambda, (2.0 * lambda / beta).sqrt()).unwrap();
        let mut rng = RngStream::new(4, 0);
        let z = random_state(3, &mut rng);
        let dw = rng.gaussian_vector(6);
        assert_eq!(em_step_forward(&z, 0.01, &a, &k, &dw), em_step_forward(&z, 0.01, &b, &k, &dw));
        assert_eq!(em_step_backward(&z, -0.01, &a, &k, &dw), em_step_backward(&z, -0.01, &b, &k, &dw));
    }

    #[test]
    fn backward_then_forward_roundtrip_shrinks() {
        let k = GaussianKernel::new(0.5).unwrap();
        let mut rng = RngStream::new(5, 0);
        let z = random_state(3, &mut rng);
        let zero = DVector::zeros(6);
        let err = |n: usize| {
            let h = 0.5 / n as f64;
            let mut s = z.clone();
            for _ in 0..n {
                s = em_step_backward(&s, -h, &still(), &k, &zero);
            }
            for _ in 0..n {
                s = em_step_forward(&s, h, &still(), &k, &zero);
            }
            (s.to_vector() - z.to_vector()).amax()
        };
        let errs: Vec<f64> = [16, 32, 64, 128].iter().map(|&n| err(n)).collect();
        for w in errs.windows(2) {
            assert!(w[1] < 0.7 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn midpoint_paths_collapse_with_tiny_delta() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(20.0, 0.5).unwrap();
        let q_star = circle(5, 1.0);
        let prior = MidpointPrior::new(q_star.clone(), 1e-20, th, &k).unwrap();
        let paths = sample_midpoint_paths(&prior, 20, 0.02, &k, 7).unwrap();
        for path in &paths {
            assert_eq!(path.n_steps(), 50);
            assert_eq!(path.time(25), 0.5);
            assert!((&path.state(25).q - q_star.coords()).amax() < 1e-8);
        }
    }

    #[test]
    fn midpoint_paths_need_even_grid() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(20.0, 0.5).unwrap();
        let prior = MidpointPrior::new(circle(4, 1.0), 0.01, th, &k).unwrap();
        assert!(matches!(sample_midpoint_paths(&prior, 1, 1.0 / 49.0, &k, 0), Err(Error::InvalidStep { .. })));
        let coincident = LandmarkConfig::from_points(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(MidpointPrior::new(coincident, 0.01, th, &k).unwrap_err(), Error::SingularKernel);
    }

    #[test]
    fn midpoint_paths_are_hamiltonian_without_thermostat() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(20.0, 0.0).unwrap();
        let prior = MidpointPrior::new(circle(4, 1.0), 0.01, th, &k).unwrap();
        for path in sample_midpoint_paths(&prior, 5, 1e-3, &k, 3).unwrap() {
            let h0 = hamiltonian(path.state(500), &k);
            for z in path.states() {
                assert!((hamiltonian(z, &k) - h0).abs() < 1e-2 * h0.max(1e-3));
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(20.0, 0.5).unwrap();
        let prior = MidpointPrior::new(circle(4, 1.0), 0.01, th, &k).unwrap();
        let a = sample_midpoint_paths(&prior, 4, 0.05, &k, 11).unwrap();
        let b = sample_midpoint_paths(&prior, 4, 0.05, &k, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ou_single_landmark_closed_form() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(10.0, 0.4).unwrap();
        let q0 = LandmarkConfig::from_points(&[vec![0.0, 0.0]]).unwrap();
        let t = 0.7;
        let ou = OuTransition::new(&q0, t, &th, &k).unwrap();
        assert!((ou.mean_op[(0, 0)] - (-0.4f64 * t).exp()).abs() < 1e-15);
        let var = (1.0 - (-2.0 * 0.4f64 * t).exp()) / 10.0;
        assert!((ou.cov[(0, 0)] - var).abs() < 1e-15);

        let p0 = DVector::from_vec(vec![1.0, -2.0]);
        let mut rng = RngStream::new(0, 0);
        assert_eq!(ou_exact(&p0, &q0, 0.0, &th, &k, &mut rng).unwrap(), p0);
    }

    #[test]
    fn ou_two_landmarks_monte_carlo() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(10.0, 0.5).unwrap();
        let q0 = LandmarkConfig::from_points(&[vec![0.0, 0.0], vec![0.4, 0.1]]).unwrap();
        let p0 = DVector::from_vec(vec![0.5, -0.3, 0.2, 0.8]);
        let ou = OuTransition::new(&q0, 1.0, &th, &k).unwrap();
        let mean = ou.mean(&p0, 2);
        let cov = crate::kernel::kron_identity(&ou.cov, 2);
        let n = 100_000;
        let mut rng = RngStream::new(21, 0);
        let draws: Vec<DVector<f64>> = (0..n).map(|_| ou_exact(&p0, &q0, 1.0, &th, &k, &mut rng).unwrap()).collect();
        let emp_mean = draws.iter().fold(DVector::zeros(4), |a, x| a + x) / n as f64;
        for a in 0..4 {
            let se = (cov[(a, a)] / n as f64).sqrt();
            assert!((emp_mean[a] - mean[a]).abs() < 5.0 * se);
            for b in 0..4 {
                let c: f64 = draws.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / n as f64;
                let se = ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / n as f64).sqrt();
                assert!((c - cov[(a, b)]).abs() < 5.0 * se, "cov[{a},{b}] {c} vs {}", cov[(a, b)]);
            }
        }
    }

    #[test]
    fn approximate_variance() {
        let th = ThermostatParams::from_beta_lambda(25.0, 0.1).unwrap();
        assert_eq!(ou_approx_variance(0.0, &th), 0.0);
        assert!((ou_approx_variance(1.0, &th) - 0.008).abs() < 1e-17);
    }

    #[test]
    fn approximate_variance_error_bound() {
        for &beta in &[10.0, 20.0, 100.0] {
            for &lambda in &[0.01, 0.1, 0.25, 0.5] {
                let th = ThermostatParams::from_beta_lambda(beta, lambda).unwrap();
                for i in 0..=100 {
                    let t = i as f64 / 100.0;
                    let exact = -(-2.0 * lambda * t).exp_m1() / beta;
                    assert!((exact - ou_approx_variance(t, &th)).abs() <= 4.0 * lambda * t / beta + 1e-16);
                }
            }
        }
    }

    #[test]
    fn conserving_two_landmarks() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(5.0, 0.5).unwrap();
        let mut rng = RngStream::new(6, 0);
        for _ in 0..50 {
            let z = random_state(2, &mut rng);
            let next = em_step_conserving(&z, 0.05, &th, &k, |_| 1.0, &[rng.gaussian()]).unwrap();
            for a in 0..2 {
                assert!((next.p[a] + next.p[2 + a] - z.p[a] - z.p[2 + a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conserving_without_thermostat_is_euler() {
        let k = GaussianKernel::new(0.5).unwrap();
        let mut rng = RngStream::new(7, 0);
        let z = random_state(4, &mut rng);
        let a = em_step_conserving(&z, 0.01, &still(), &k, |_| 1.0, &[0.3; 6]).unwrap();
        let b = em_step_forward(&z, 0.01, &still(), &k, &DVector::zeros(8));
        assert_eq!(a, b);
    }

    #[test]
    fn conserving_rejects_coincident_pair() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(5.0, 0.5).unwrap();
        let z = PhaseState::new(2, DVector::zeros(6), DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(
            em_step_conserving(&z, 0.01, &th, &k, |_| 1.0, &[0.0; 3]).unwrap_err(),
            Error::DegeneratePair { i: 1, j: 2 }
        );
    }

    #[test]
    fn pushforward_at_rest_leaves_grid() {
        let k = GaussianKernel::new(0.5).unwrap();
        let th = ThermostatParams::from_beta_lambda(1e30, 0.0).unwrap();
        let grid: Vec<Vec<f64>> = (0..4).flat_map(|i| (0..4).map(move |j| vec![i as f64 * 0.3, j as f64 * 0.3])).collect();
        let s = FlowSettings::euler(0.05).unwrap();
        for sample in pushforward_ensemble(&circle(5, 1.0), &th, &k, &s, 3, &grid, 1).unwrap() {
            for (a, b) in sample.points.iter().zip(&grid) {
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10));
            }
        }
    }
}
