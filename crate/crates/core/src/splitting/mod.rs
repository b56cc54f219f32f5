//! MAP estimation and Laplace approximations under the operator-splitting
//! priors: registration of two sets from a phase point at `t = 0`, the
//! two-set average at `t = ½`, and the multi-set average.

mod objectives;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{shoot_register, FlowSettings};
use crate::kernel::{hamiltonian, Kernel, LandmarkConfig, PhaseState, ThermostatParams};
use crate::numerics::{lbfgs_minimise, psd_from_spectrum, LbfgsOptions, LbfgsResult, PsdMode, RngStream, SpectralDecomp};

pub use objectives::{
    matrix_exp_kernel, matrix_exp_kernel_derivative, FirstSplitting, MultiSplitting, SecondSplitting, SplitObjective,
    EXPM_FD_STEP, FLOW_FD_STEP,
};

#[derive(Debug, Clone)]
pub struct MapSettings {
    pub flow: FlowSettings,
    /// Observation variance `δ²`.
    pub delta2_obs: f64,
    pub lbfgs: LbfgsOptions,
    /// Extra attempts from perturbed starts when the optimiser fails.
    pub restarts: usize,
    /// Perturbation scale of a restart, relative to the data spread.
    pub restart_scale: f64,
    pub seed: u64,
}

impl MapSettings {
    pub fn new(flow: FlowSettings, delta2_obs: f64) -> Self {
        MapSettings { flow, delta2_obs, lbfgs: LbfgsOptions::default(), restarts: 3, restart_scale: 0.1, seed: 0 }
    }
}

/// Per-landmark RMS distance of the sets from their arithmetic mean.
pub fn data_spread(sets: &[LandmarkConfig]) -> f64 {
    let mean = arithmetic_mean(sets);
    let n = mean.count().max(1) as f64;
    let total: f64 = sets.iter().map(|s| (s.coords() - mean.coords()).norm_squared()).sum();
    (total / (sets.len().max(1) as f64 * n)).sqrt()
}

pub fn arithmetic_mean(sets: &[LandmarkConfig]) -> LandmarkConfig {
    let sum = sets.iter().skip(1).fold(sets[0].coords().clone(), |acc, s| acc + s.coords());
    LandmarkConfig::new(sets[0].dim(), sum / sets.len() as f64).expect("mean of valid sets")
}

/// Per-landmark RMS distance between two configurations.
pub fn landmark_rms(a: &LandmarkConfig, b: &LandmarkConfig) -> f64 {
    ((a.coords() - b.coords()).norm_squared() / a.count().max(1) as f64).sqrt()
}

/// L-BFGS from `x0`, then from perturbations of the best iterate while the
/// optimiser has not converged.
pub fn minimise<O: SplitObjective>(obj: &O, x0: DVector<f64>, settings: &MapSettings, spread: f64) -> Result<LbfgsResult> {
    let eval = |x: &DVector<f64>| obj.value_grad(x).ok().filter(|(f, g)| f.is_finite() && g.iter().all(|v| v.is_finite()));
    if eval(&x0).is_none() {
        return Err(Error::NonFinite("objective at the starting point"));
    }
    let mut best = lbfgs_minimise(eval, x0, &settings.lbfgs);
    let scale = settings.restart_scale * spread.max(1e-3);
    for attempt in 0..settings.restarts {
        if best.converged() {
            break;
        }
        let mut rng = RngStream::new(settings.seed, attempt as u64 + 1);
        let start = &best.x + rng.gaussian_vector(best.x.len()) * scale;
        if eval(&start).is_none() {
            continue;
        }
        let res = lbfgs_minimise(eval, start, &settings.lbfgs);
        if res.converged() || res.value < best.value {
            let iterations = best.iterations + res.iterations;
            best = LbfgsResult { iterations, ..res };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct LaplaceCov {
    pub cov: DMatrix<f64>,
    /// Eigenvalues of the curvature kept by clipping.
    pub retained: usize,
    pub discarded_fraction: f64,
}

impl LaplaceCov {
    /// `sqrt(tr Σᵢ / d)` for each landmark of the position block starting at
    /// `offset`.
    pub fn landmark_sd(&self, offset: usize, count: usize, dim: usize) -> Vec<f64> {
        (0..count)
            .map(|i| {
                let tr: f64 = (0..dim).map(|a| self.cov[(offset + i * dim + a, offset + i * dim + a)]).sum();
                (tr.max(0.0) / dim as f64).sqrt()
            })
            .collect()
    }

    /// Covariance of the linear image `J x`.
    pub fn pushed(&self, jac: &DMatrix<f64>) -> LaplaceCov {
        let mut cov = jac * &self.cov * jac.transpose();
        crate::numerics::symmetrize(&mut cov);
        LaplaceCov { cov, retained: self.retained, discarded_fraction: self.discarded_fraction }
    }
}

/// Pseudo-inverse of a curvature matrix on its clipped spectrum.
pub fn laplace_from_curvature(curvature: &DMatrix<f64>) -> Result<LaplaceCov> {
    let mut c = curvature.clone();
    crate::numerics::symmetrize(&mut c);
    let spec = SpectralDecomp::new(&c);
    let res = psd_from_spectrum(&spec, PsdMode::PseudoInverse);
    if res.retained == 0 {
        return Err(Error::DegenerateCurvature);
    }
    Ok(LaplaceCov { cov: res.matrix, retained: res.retained, discarded_fraction: res.discarded_fraction })
}

/// Gauss–Newton Laplace covariance of any splitting objective at `x`.
pub fn laplace_generic<O: SplitObjective>(obj: &O, x: &DVector<f64>) -> Result<LaplaceCov> {
    laplace_from_curvature(&obj.curvature(x)?)
}

#[derive(Debug, Clone)]
pub struct FirstSplitMAP {
    pub p0: DVector<f64>,
    pub q0: DVector<f64>,
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `‖qʳ − q₀‖`.
    pub residual_r: f64,
    /// `‖qᵗ − S_q(1; 0, [p₀, q₀])‖`.
    pub residual_t: f64,
}

impl FirstSplitMAP {
    pub fn x(&self) -> DVector<f64> {
        let mut x = DVector::zeros(2 * self.p0.len());
        x.rows_mut(0, self.p0.len()).copy_from(&self.p0);
        x.rows_mut(self.p0.len(), self.q0.len()).copy_from(&self.q0);
        x
    }
}

/// Value and gradient of the first-splitting objective at `(p₀, q₀)`.
#[allow(clippy::too_many_arguments)]
pub fn objective_first<K: Kernel>(
    p0: &DVector<f64>,
    q0: &DVector<f64>,
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    beta: f64,
    delta2_obs: f64,
    flow: &FlowSettings,
    k: &K,
) -> Result<(f64, DVector<f64>)> {
    let obj = FirstSplitting::new(q_r, q_t, beta, delta2_obs, *flow, k)?;
    obj.value_grad(&stack(&[p0, q0]))
}

fn stack(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

/// MAP phase point at `t = 0` for noisy two-set registration.
///
/// Starts from `q₀ = qʳ` with the best of the shooting momentum, half of it
/// and zero.
pub fn map_first<K: Kernel>(
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    beta: f64,
    settings: &MapSettings,
    k: &K,
) -> Result<FirstSplitMAP> {
    let obj = FirstSplitting::new(q_r, q_t, beta, settings.delta2_obs, settings.flow, k)?;
    let m = q_r.coords().len();
    let shoot = shoot_register(q_r, q_t, &settings.flow, k, 1e-8)?;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for scale in [1.0, 0.5, 0.0] {
        let x = stack(&[&(&shoot.p0 * scale), q_r.coords()]);
        if let Ok(v) = obj.value(&x) {
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, x));
            }
        }
    }
    let (_, x0) = best.ok_or(Error::NonFinite("objective at every initial point"))?;
    let spread = data_spread(&[q_r.clone(), q_t.clone()]);
    let res = minimise(&obj, x0, settings, spread)?;
    let value = obj.value(&res.x)?;
    let end = obj.endpoint(&res.x)?;
    let q0 = res.x.rows(m, m).into_owned();
    Ok(FirstSplitMAP {
        p0: res.x.rows(0, m).into_owned(),
        residual_r: (q_r.coords() - &q0).norm(),
        residual_t: (q_t.coords() - end).norm(),
        q0,
        objective_value: value,
        converged: res.converged(),
        iterations: res.iterations,
    })
}

/// Laplace covariance over `(p₀, q₀)` at a first-splitting MAP point.
pub fn laplace_first<K: Kernel>(
    map: &FirstSplitMAP,
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    beta: f64,
    settings: &MapSettings,
    k: &K,
) -> Result<LaplaceCov> {
    let obj = FirstSplitting::new(q_r, q_t, beta, settings.delta2_obs, settings.flow, k)?;
    laplace_generic(&obj, &map.x())
}

/// `S_q(½; 0, [p₀, q₀])`, the midpoint of the registration path.
pub fn geodesic_midpoint<K: Kernel>(map: &FirstSplitMAP, dim: usize, flow: &FlowSettings, k: &K) -> Result<LandmarkConfig> {
    let z = PhaseState::new(dim, map.p0.clone(), map.q0.clone())?;
    crate::flow::flow_end(&z, 0.5, flow, k)?.positions()
}

#[derive(Debug, Clone)]
pub struct SecondSplitMAP {
    pub p_half: DVector<f64>,
    pub q_half: DVector<f64>,
    pub p_tilde_half: DVector<f64>,
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    dim: usize,
}

impl SecondSplitMAP {
    pub fn average(&self) -> LandmarkConfig {
        LandmarkConfig::new(self.dim, self.q_half.clone()).expect("finite MAP point")
    }

    pub fn x(&self) -> DVector<f64> {
        stack(&[&self.p_half, &self.q_half, &self.p_tilde_half])
    }
}

#[allow(clippy::too_many_arguments)]
pub fn objective_second<K: Kernel>(
    p_half: &DVector<f64>,
    q_half: &DVector<f64>,
    p_tilde_half: &DVector<f64>,
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    th: &ThermostatParams,
    delta2_obs: f64,
    flow: &FlowSettings,
    k: &K,
) -> Result<(f64, DVector<f64>)> {
    let obj = SecondSplitting::new(q_r, q_t, th.beta(), th.lambda(), delta2_obs, *flow, k)?;
    obj.value_grad(&stack(&[p_half, q_half, p_tilde_half]))
}

fn warn_if_outside<K: Kernel>(avg: &DVector<f64>, data: &[&LandmarkConfig], k: &K) {
    let d = data[0].dim();
    let margin = 3.0 * k.length_scale();
    for a in 0..d {
        let coords = data.iter().flat_map(|s| s.coords().iter().skip(a).step_by(d).copied());
        let (lo, hi) = coords.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if avg.iter().skip(a).step_by(d).any(|&v| v < lo - margin || v > hi + margin) {
            warn!("average leaves the data bounding box inflated by 3 length scales");
            return;
        }
    }
}

/// MAP two-set average, started from zero momenta at the arithmetic midpoint.
pub fn map_second<K: Kernel>(
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    th: &ThermostatParams,
    settings: &MapSettings,
    k: &K,
) -> Result<SecondSplitMAP> {
    let obj = SecondSplitting::new(q_r, q_t, th.beta(), th.lambda(), settings.delta2_obs, settings.flow, k)?;
    let m = q_r.coords().len();
    let data = [q_r.clone(), q_t.clone()];
    let mid = arithmetic_mean(&data);
    let zero = DVector::zeros(m);
    let res = minimise(&obj, stack(&[&zero, mid.coords(), &zero]), settings, data_spread(&data))?;
    let q_half = res.x.rows(m, m).into_owned();
    warn_if_outside(&q_half, &[q_r, q_t], k);
    Ok(SecondSplitMAP {
        p_half: res.x.rows(0, m).into_owned(),
        p_tilde_half: res.x.rows(2 * m, m).into_owned(),
        q_half,
        objective_value: obj.value(&res.x)?,
        converged: res.converged(),
        iterations: res.iterations,
        dim: q_r.dim(),
    })
}

/// Laplace covariance over `(p, q, p̃)` at a two-set MAP point.
pub fn laplace_second<K: Kernel>(
    map: &SecondSplitMAP,
    q_r: &LandmarkConfig,
    q_t: &LandmarkConfig,
    th: &ThermostatParams,
    settings: &MapSettings,
    k: &K,
) -> Result<LaplaceCov> {
    let obj = SecondSplitting::new(q_r, q_t, th.beta(), th.lambda(), settings.delta2_obs, settings.flow, k)?;
    laplace_generic(&obj, &map.x())
}

#[derive(Debug, Clone)]
pub struct MultiSetMAP {
    pub p_star: DVector<f64>,
    pub q_star: DVector<f64>,
    pub p_j: Vec<DVector<f64>>,
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    dim: usize,
}

impl MultiSetMAP {
    pub fn average(&self) -> LandmarkConfig {
        LandmarkConfig::new(self.dim, self.q_star.clone()).expect("finite MAP point")
    }

    pub fn x(&self) -> DVector<f64> {
        let mut parts = vec![&self.p_star, &self.q_star];
        parts.extend(self.p_j.iter());
        stack(&parts)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn objective_multi<K: Kernel>(
    p_star: &DVector<f64>,
    q_star: &DVector<f64>,
    p_list: &[DVector<f64>],
    data: &[LandmarkConfig],
    th: &ThermostatParams,
    delta2_obs: f64,
    flow: &FlowSettings,
    k: &K,
) -> Result<(f64, DVector<f64>)> {
    let obj = MultiSplitting::new(data, th.beta(), th.lambda(), delta2_obs, *flow, k)?;
    if p_list.len() != data.len() {
        return Err(Error::DimensionMismatch("one momentum per data set is required".into()));
    }
    let mut parts = vec![p_star, q_star];
    parts.extend(p_list.iter());
    obj.value_grad(&stack(&parts))
}

/// MAP multi-set average, started from zero momenta at the arithmetic mean.
pub fn map_multi<K: Kernel>(data: &[LandmarkConfig], th: &ThermostatParams, settings: &MapSettings, k: &K) -> Result<MultiSetMAP> {
    let obj = MultiSplitting::new(data, th.beta(), th.lambda(), settings.delta2_obs, settings.flow, k)?;
    let m = data[0].coords().len();
    let mean = arithmetic_mean(data);
    let mut x0 = DVector::zeros(obj.dim());
    x0.rows_mut(m, m).copy_from(mean.coords());
    let res = minimise(&obj, x0, settings, data_spread(data))?;
    let q_star = res.x.rows(m, m).into_owned();
    warn_if_outside(&q_star, &data.iter().collect::<Vec<_>>(), k);
    Ok(MultiSetMAP {
        p_star: res.x.rows(0, m).into_owned(),
        p_j: (0..data.len()).map(|j| res.x.rows((2 + j) * m, m).into_owned()).collect(),
        q_star,
        objective_value: obj.value(&res.x)?,
        converged: res.converged(),
        iterations: res.iterations,
        dim: data[0].dim(),
    })
}

/// Laplace covariance over `(p*, q*, p¹, …, pᴶ)` at a multi-set MAP point.
pub fn laplace_multi<K: Kernel>(
    map: &MultiSetMAP,
    data: &[LandmarkConfig],
    th: &ThermostatParams,
    settings: &MapSettings,
    k: &K,
) -> Result<LaplaceCov> {
    let obj = MultiSplitting::new(data, th.beta(), th.lambda(), settings.delta2_obs, settings.flow, k)?;
    laplace_generic(&obj, &map.x())
}

/// `βH` at a phase point; convenience for reporting.
pub fn scaled_energy<K: Kernel>(beta: f64, p: &DVector<f64>, q: &DVector<f64>, dim: usize, k: &K) -> f64 {
    beta * hamiltonian(&PhaseState { dim, p: p.clone(), q: q.clone() }, k)
}
