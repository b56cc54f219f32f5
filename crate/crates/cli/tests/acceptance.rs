//! Acceptance suite: one numbered check per criterion, each printing a single
//! PASS/FAIL line. Exits non-zero when any check fails.

use std::path::Path;
use std::time::{Duration, Instant};

use landreg_cli::commands::{median, median_displacement};
use landreg_cli::config::Overrides;
use landreg_cli::report::Grid;
use landreg_cli::{run_command, CommandKind};
use landreg_core::flow::{flow, shoot_register};
use landreg_core::kernel::{gibbs_momentum_sample, hamiltonian, kernel_matrix};
use landreg_core::langevin::{em_step_conserving, ou_exact, pair_count, pushforward_ensemble, simulate_forward};
use landreg_core::linearised::{linearise_about, GaussianDist, LinearisedSystem};
use landreg_core::numerics::{fd_gradient, RngStream};
use landreg_core::splitting::{
    arithmetic_mean, data_spread, geodesic_midpoint, laplace_multi, landmark_rms, map_first, map_multi, map_second,
    objective_second, FirstSplitting, MapSettings, MultiSplitting, SecondSplitting, SplitObjective,
};
use landreg_core::{FlowSettings, GaussianKernel, LandmarkConfig, PhaseState, ThermostatParams};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn circle(n: usize, radius: f64) -> LandmarkConfig {
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            vec![radius * t.cos(), radius * t.sin()]
        })
        .collect();
    LandmarkConfig::from_points(&pts).unwrap()
}

fn perturbed(base: &LandmarkConfig, sd: f64, rng: &mut RngStream) -> LandmarkConfig {
    LandmarkConfig::new(base.dim(), base.coords() + rng.gaussian_vector(base.coords().len()) * sd).unwrap()
}

/// Least-squares slope of `log y` against `log x`.
fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn within_time(start: Instant, limit: Duration) -> (bool, String) {
    let took = start.elapsed();
    (took < limit, format!("{:.2}s/{}s", took.as_secs_f64(), limit.as_secs()))
}

/// Empirical mean and covariance of the rows of `draws`.
fn moments(draws: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = draws.len() as f64;
    let dim = draws[0].len();
    let mean = draws.iter().fold(DVector::zeros(dim), |acc, x| acc + x) / n;
    let mut cov = DMatrix::zeros(dim, dim);
    for x in draws {
        let c = x - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (n - 1.0))
}

/// Largest deviation of empirical moments from `(mean, cov)` in units of
/// Gaussian Monte Carlo standard errors.
fn worst_z(draws: &[DVector<f64>], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = draws.len() as f64;
    let (m, c) = moments(draws);
    let mut worst: f64 = 0.0;
    for i in 0..mean.len() {
        let se = (cov[(i, i)] / n).sqrt();
        if se > 0.0 {
            worst = worst.max((m[i] - mean[i]).abs() / se);
        }
        for j in 0..mean.len() {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n).sqrt();
            if se > 0.0 {
                worst = worst.max((c[(i, j)] - cov[(i, j)]).abs() / se);
            }
        }
    }
    worst
}

fn kron_eye(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    m.kronecker(&DMatrix::identity(d, d))
}

fn c1_hamiltonian_conservation() -> Outcome {
    let start = Instant::now();
    let k = GaussianKernel::new(0.5).unwrap();
    let (q_r, q_t) = (circle(20, 1.0), circle(20, 2.0));
    let settings = FlowSettings::rk4(1e-2).unwrap();
    let shoot = shoot_register(&q_r, &q_t, &settings, &k, 1e-9).unwrap();
    let h0 = hamiltonian(shoot.path.first(), &k);
    let drift = shoot.path.states().iter().map(|z| (hamiltonian(z, &k) - h0).abs() / h0).fold(0.0, f64::max);
    let z0 = shoot.path.first().clone();
    let hs = [0.2, 0.1, 0.05, 0.025];
    let drifts: Vec<f64> = hs
        .iter()
        .map(|&h| {
            let p = flow(&z0, 0.0, 1.0, &FlowSettings::rk4(h).unwrap(), &k).unwrap();
            p.states().iter().map(|z| (hamiltonian(z, &k) - h0).abs() / h0).fold(0.0, f64::max)
        })
        .collect();
    let slope = loglog_slope(&hs, &drifts);
    let (fast, time) = within_time(start, Duration::from_secs(5));
    outcome(
        drift <= 1e-6 && (3.5..=4.5).contains(&slope) && fast,
        format!("relative drift {drift:.2e} (<= 1e-6), refinement slope {slope:.3} (in [3.5, 4.5]), {time}"),
    )
}

fn c2_exact_registration() -> Outcome {
    let start = Instant::now();
    let k = GaussianKernel::new(0.5).unwrap();
    let settings = FlowSettings::rk4(1e-2).unwrap();
    let shoot = shoot_register(&circle(20, 1.0), &circle(20, 2.0), &settings, &k, 1e-9).unwrap();
    let (a, b) = (vec![0.3, -0.2], vec![1.1, 0.4]);
    let single = shoot_register(
        &LandmarkConfig::from_points(std::slice::from_ref(&a)).unwrap(),
        &LandmarkConfig::from_points(std::slice::from_ref(&b)).unwrap(),
        &settings,
        &k,
        1e-12,
    )
    .unwrap();
    let mut line_err: f64 = (0..2).map(|i| (single.p0[i] - (b[i] - a[i])).abs()).fold(0.0, f64::max);
    for (n, z) in single.path.states().iter().enumerate() {
        let t = single.path.time(n);
        for i in 0..2 {
            line_err = line_err.max((z.q[i] - (a[i] + t * (b[i] - a[i]))).abs());
        }
    }
    let (fast, time) = within_time(start, Duration::from_secs(10));
    outcome(
        shoot.residual < 1e-6 && line_err < 1e-10 && fast,
        format!("circle mismatch {:.2e} (< 1e-6), single-landmark error {line_err:.2e} (< 1e-10), {time}", shoot.residual),
    )
}

fn c3_em_strong_order() -> Outcome {
    let start = Instant::now();
    let k = GaussianKernel::new(0.5).unwrap();
    let th = ThermostatParams::from_beta_lambda(10.0, 0.5).unwrap();
    let q0 = LandmarkConfig::from_points(&[vec![0.0, 0.0], vec![0.6, 0.2]]).unwrap();
    let z0 = PhaseState::with_momentum(DVector::from_vec(vec![0.5, 0.2, -0.3, 0.4]), &q0).unwrap();
    let fine_level = 14;
    let levels = [6, 7, 8, 9, 10];
    let paths = 64;
    let errors: Vec<Vec<f64>> = (0..paths)
        .map(|path| {
            let mut rng = RngStream::new(7, path);
            let nf = 1usize << fine_level;
            let hf = 1.0 / nf as f64;
            let fine: Vec<DVector<f64>> = (0..nf).map(|_| rng.brownian_increment(4, hf)).collect();
            let reference = simulate_forward(&z0, 0.0, hf, &th, &k, &fine).unwrap().last().to_vector();
            levels
                .iter()
                .map(|&l| {
                    let ratio = 1usize << (fine_level - l);
                    let coarse: Vec<DVector<f64>> =
                        fine.chunks(ratio).map(|c| c.iter().fold(DVector::zeros(4), |acc, v| acc + v)).collect();
                    let h = 1.0 / (1usize << l) as f64;
                    let end = simulate_forward(&z0, 0.0, h, &th, &k, &coarse).unwrap().last().to_vector();
                    (end - &reference).norm_squared()
                })
                .collect()
        })
        .collect();
    let rms: Vec<f64> =
        (0..levels.len()).map(|i| (errors.iter().map(|e| e[i]).sum::<f64>() / paths as f64).sqrt()).collect();
    let hs: Vec<f64> = levels.iter().map(|&l| 1.0 / (1u64 << l) as f64).collect();
    let slope = loglog_slope(&hs, &rms);
    let (fast, time) = within_time(start, Duration::from_secs(60));
    outcome((0.85..=1.15).contains(&slope) && fast, format!("strong order {slope:.3} (in [0.85, 1.15]), {time}"))
}

fn c4_ou_exactness() -> Outcome {
    let start = Instant::now();
    let k = GaussianKernel::new(0.5).unwrap();
    let th = ThermostatParams::from_beta_lambda(4.0, 0.7).unwrap();
    let t = 0.8;
    let mut worst: f64 = 0.0;
    for q0 in [
        LandmarkConfig::from_points(&[vec![0.2, -0.1]]).unwrap(),
        LandmarkConfig::from_points(&[vec![0.0, 0.0], vec![0.4, 0.3]]).unwrap(),
    ] {
        let n = q0.count();
        let p0 = DVector::from_fn(2 * n, |i, _| 0.5 - 0.3 * i as f64);
        let g = kernel_matrix(&q0, &k);
        let mean = kron_eye(&(&g * (-th.lambda() * t)).exp(), 2) * &p0;
        let ident = DMatrix::<f64>::identity(n, n);
        let c = g.clone().try_inverse().unwrap() * (ident - (&g * (-2.0 * th.lambda() * t)).exp()) / th.beta();
        let cov = kron_eye(&c, 2);
        let mut rng = RngStream::new(11, n as u64);
        let draws: Vec<DVector<f64>> = (0..100_000).map(|_| ou_exact(&p0, &q0, t, &th, &k, &mut rng).unwrap()).collect();
        worst = worst.max(worst_z(&draws, &mean, &cov));
    }
    let (_, time) = within_time(start, Duration::from_secs(30));
    let fast = start.elapsed() < Duration::from_secs(30);
    outcome(worst < 5.0 && fast, format!("worst moment deviation {worst:.2} standard errors (< 5) for N = 1, 2, {time}"))
}

fn c5_gibbs_invariance() -> Outcome {
    let k = GaussianKernel::new(0.5).unwrap();
    let th = ThermostatParams::from_beta_lambda(3.0, 0.9).unwrap();
    let q0 = LandmarkConfig::from_points(&[vec![0.0, 0.0], vec![0.5, 0.1], vec![0.1, 0.6]]).unwrap();
    let g = kernel_matrix(&q0, &k);
    let cov = kron_eye(&(g.try_inverse().unwrap() / th.beta()), 2);
    let mut rng = RngStream::new(5, 0);
    let draws: Vec<DVector<f64>> = (0..100_000)
        .map(|_| {
            let p = gibbs_momentum_sample(&q0, th.beta(), &k, &mut rng).unwrap();
            ou_exact(&p, &q0, 1.0, &th, &k, &mut rng).unwrap()
        })
        .collect();
    let worst = worst_z(&draws, &DVector::zeros(6), &cov);
    outcome(worst < 5.0, format!("worst moment deviation {worst:.2} standard errors (< 5) after t = 1"))
}

/// Single landmark in one dimension moving with unit momentum; three nodes.
fn tiny_system(lambda: f64, beta: f64) -> LinearisedSystem {
    let k = GaussianKernel::new(0.5).unwrap();
    let th = ThermostatParams::from_beta_lambda(beta, lambda).unwrap();
    let z0 = PhaseState::new(1, DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.0])).unwrap();
    let path = flow(&z0, 0.0, 1.0, &FlowSettings::rk4(0.5).unwrap(), &k).unwrap();
    linearise_about(&path, &th, &k).unwrap()
}

fn c6_recursions() -> Outcome {
    let (lambda, beta, delta2) = (0.3, 4.0, 0.2);
    let k = GaussianKernel::new(0.5).unwrap();
    let sys = tiny_system(lambda, beta);
    let joint = sys.propagate_moments(&sys.midpoint_init(delta2, &k).unwrap()).unwrap();

    let h = 0.5;
    let a = 1.0 - lambda * h;
    let c = 1.0 / beta;
    let s2h = 2.0 * lambda / beta * h;
    // Node order 0, 1, 2; each node is (p, q).
    #[rustfmt::skip]
    let hand = DMatrix::from_row_slice(6, 6, &[
        a * a * c + s2h, -a * h * c,          a * c,  0.0,    a * a * c,       a * h * c,
        -a * h * c,      h * h * c + delta2,  -h * c, delta2, -a * h * c,      -h * h * c + delta2,
        a * c,           -h * c,              c,      0.0,    a * c,           h * c,
        0.0,             delta2,              0.0,    delta2, 0.0,             delta2,
        a * a * c,       -a * h * c,          a * c,  0.0,    a * a * c + s2h, a * h * c,
        a * h * c,       -h * h * c + delta2, h * c,  delta2, a * h * c,       h * h * c + delta2,
    ]);
    let drift = -h * lambda;
    let hand_mean = DVector::from_vec(vec![drift, 0.0, 0.0, 0.0, drift, 0.0]);
    let sym_err = (&joint.cov - &hand).amax().max((&joint.mean - &hand_mean).amax());

    let mut rng = RngStream::new(3, 0);
    let (mp, mm) = (DMatrix::from_row_slice(2, 2, &[a, 0.0, h, 1.0]), DMatrix::from_row_slice(2, 2, &[a, 0.0, -h, 1.0]));
    let shift = DVector::from_vec(vec![drift, 0.0]);
    let draws: Vec<DVector<f64>> = (0..100_000)
        .map(|_| {
            let mid = DVector::from_vec(vec![c.sqrt() * rng.gaussian(), delta2.sqrt() * rng.gaussian()]);
            let noise = |rng: &mut RngStream| DVector::from_vec(vec![s2h.sqrt() * rng.gaussian(), 0.0]);
            let fwd = &mp * &mid + &shift + noise(&mut rng);
            let bwd = &mm * &mid + &shift + noise(&mut rng);
            DVector::from_iterator(6, bwd.iter().chain(mid.iter()).chain(fwd.iter()).copied())
        })
        .collect();
    let worst = worst_z(&draws, &joint.mean, &joint.cov);
    outcome(
        sym_err < 1e-12 && worst < 5.0,
        format!("hand evaluation error {sym_err:.2e} (< 1e-12), Monte Carlo worst {worst:.2} standard errors (< 5)"),
    )
}

/// Dense Gaussian conditioning of the joint law on noisy endpoint positions.
fn dense_condition(sys: &LinearisedSystem, joint: &GaussianDist, y: &DVector<f64>, delta2: f64) -> GaussianDist {
    let dn = sys.state_dim() / 2;
    let total = sys.joint_dim();
    let mut obs = DMatrix::zeros(2 * dn, total);
    for i in 0..dn {
        obs[(i, sys.q_offset(0) + i)] = 1.0;
        obs[(dn + i, sys.q_offset(sys.n_steps()) + i)] = 1.0;
    }
    let path = sys.base_path();
    let base = DVector::from_iterator(2 * dn, path.first().q.iter().chain(path.last().q.iter()).copied());
    let s = &obs * &joint.cov * obs.transpose() + DMatrix::identity(2 * dn, 2 * dn) * delta2;
    let gain = &joint.cov * obs.transpose() * s.try_inverse().unwrap();
    let mean = &joint.mean + &gain * (y - base - &obs * &joint.mean);
    let cov = &joint.cov - &gain * &obs * &joint.cov;
    GaussianDist { mean, cov }
}

fn c7_conditioning() -> Outcome {
    let k = GaussianKernel::new(0.5).unwrap();
    let mut err: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let tiny = tiny_system(0.3, 4.0);
    let q_r = LandmarkConfig::from_points(&[vec![0.0, 0.0], vec![0.7, 0.1]]).unwrap();
    let q_t = LandmarkConfig::from_points(&[vec![0.2, 0.3], vec![1.0, 0.5]]).unwrap();
    let th = ThermostatParams::from_beta_lambda(5.0, 0.2).unwrap();
    let shoot = shoot_register(&q_r, &q_t, &FlowSettings::rk4(0.25).unwrap(), &k, 1e-10).unwrap();
    let small = linearise_about(&shoot.path, &th, &k).unwrap();
    for (sys, r, t) in [
        (&tiny, DVector::from_vec(vec![0.1]), DVector::from_vec(vec![0.8])),
        (&small, q_r.coords() + DVector::from_vec(vec![0.05, 0.0, 0.0, -0.02]), q_t.coords().clone()),
    ] {
        let joint = sys.propagate_moments(&sys.midpoint_init(0.05, &k).unwrap()).unwrap();
        let delta2 = 0.01;
        let post = sys.condition_on_endpoints(&joint, &r, &t, delta2).unwrap();
        let y = DVector::from_iterator(r.len() * 2, r.iter().chain(t.iter()).copied());
        let dense = dense_condition(sys, &joint, &y, delta2);
        err = err.max((&post.cov - &dense.cov).amax()).max((&post.mean - &dense.mean).amax());
        let gap = &joint.cov - &post.cov;
        min_eig = min_eig.min(gap.symmetric_eigenvalues().min());
    }
    outcome(
        err < 1e-10 && min_eig >= -1e-8,
        format!("dense conditioning error {err:.2e} (< 1e-10), prior minus posterior min eigenvalue {min_eig:.2e} (>= -1e-8)"),
    )
}

fn c8_limits() -> Outcome {
    let start = Instant::now();
    let k = GaussianKernel::new(0.5).unwrap();
    let flow = FlowSettings::rk4(0.05).unwrap();
    let base = circle(6, 0.6);
    let mut rng = RngStream::new(21, 0);
    let sets: Vec<LandmarkConfig> = (0..4).map(|_| perturbed(&base, 0.08, &mut rng)).collect();
    let settings = MapSettings { seed: 1, ..MapSettings::new(flow, 0.01) };
    let pair = &sets[..2];
    let (pair_mean, multi_mean) = (arithmetic_mean(pair), arithmetic_mean(&sets));
    let mut d_second = Vec::new();
    let mut d_multi = Vec::new();
    for beta in [25.0, 100.0, 400.0, 1600.0] {
        let th = ThermostatParams::from_beta_lambda(beta, 0.1).unwrap();
        let second = map_second(&pair[0], &pair[1], &th, &settings, &k).unwrap();
        d_second.push(landmark_rms(&second.average(), &pair_mean));
        let multi = map_multi(&sets, &th, &settings, &k).unwrap();
        d_multi.push(landmark_rms(&multi.average(), &multi_mean));
    }
    let (s_pair, s_multi) = (data_spread(pair), data_spread(&sets));
    let beta_ok = strictly_decreasing(&d_second)
        && strictly_decreasing(&d_multi)
        && d_second[3] < 0.1 * s_pair
        && d_multi[3] < 0.1 * s_multi;

    let beta = 25.0;
    let first = map_first(&pair[0], &pair[1], beta, &settings, &k).unwrap();
    let midpoint = geodesic_midpoint(&first, 2, &flow, &k).unwrap();
    let mut d_lambda = Vec::new();
    for lambda in [1e-1, 1e-2, 1e-3] {
        let th = ThermostatParams::from_beta_lambda(beta, lambda).unwrap();
        let second = map_second(&pair[0], &pair[1], &th, &settings, &k).unwrap();
        d_lambda.push(landmark_rms(&second.average(), &midpoint));
    }
    let lambda_ok = strictly_decreasing(&d_lambda);
    let (fast, time) = within_time(start, Duration::from_secs(300));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" > ");
    outcome(
        beta_ok && lambda_ok && fast,
        format!(
            "beta sweep: two-set {} (spread {s_pair:.2e}), multi {} (spread {s_multi:.2e}); lambda sweep {}; {time}",
            fmt(&d_second),
            fmt(&d_multi),
            fmt(&d_lambda)
        ),
    )
}

fn c9_trivial_bound() -> Outcome {
    let k = GaussianKernel::new(0.5).unwrap();
    let flow = FlowSettings::rk4(0.05).unwrap();
    let delta2 = 0.02;
    let th = ThermostatParams::from_beta_lambda(25.0, 0.1).unwrap();
    let mut rng = RngStream::new(9, 0);
    let mut err: f64 = 0.0;
    let mut bound_ok = true;
    for _ in 0..3 {
        let q_r = perturbed(&circle(5, 0.7), 0.1, &mut rng);
        let q_t = perturbed(&circle(5, 0.9), 0.1, &mut rng);
        let zero = DVector::zeros(10);
        let mid = arithmetic_mean(&[q_r.clone(), q_t.clone()]);
        let (value, _) = objective_second(&zero, mid.coords(), &zero, &q_r, &q_t, &th, delta2, &flow, &k).unwrap();
        let bound = (q_r.coords() - q_t.coords()).norm_squared() / (4.0 * delta2);
        err = err.max((value - bound).abs());
        let map = map_second(&q_r, &q_t, &th, &MapSettings::new(flow, delta2), &k).unwrap();
        bound_ok &= map.objective_value <= bound;
    }
    outcome(err < 1e-10 && bound_ok, format!("trivial-point error {err:.2e} (< 1e-10), optimum within bound: {bound_ok}"))
}

fn c10_momentum_conservation() -> Outcome {
    let k = GaussianKernel::new(0.5).unwrap();
    let th = ThermostatParams::from_beta_lambda(5.0, 0.4).unwrap();
    let q = LandmarkConfig::from_points(&[vec![0.0, 0.0], vec![0.5, 0.1], vec![0.2, 0.6], vec![-0.4, 0.3]]).unwrap();
    let mut z = PhaseState::with_momentum(DVector::from_vec(vec![0.3, -0.1, 0.2, 0.4, -0.5, 0.1, 0.0, 0.2]), &q).unwrap();
    let total = |z: &PhaseState| [0, 1].map(|a| z.p.iter().skip(a).step_by(2).sum::<f64>());
    let p0 = total(&z);
    let h: f64 = 1e-3;
    let mut rng = RngStream::new(13, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dw: Vec<f64> = (0..pair_count(4)).map(|_| rng.gaussian() * h.sqrt()).collect();
        z = em_step_conserving(&z, h, &th, &k, |r| (-r * r).exp(), &dw).unwrap();
        let p = total(&z);
        worst = worst.max((p[0] - p0[0]).abs()).max((p[1] - p0[1]).abs());
    }
    outcome(worst < 1e-10, format!("total momentum change {worst:.2e} (< 1e-10) over 1000 steps"))
}

fn c11_prior_smoothing() -> Outcome {
    let start = Instant::now();
    let k = GaussianKernel::new(0.5).unwrap();
    let flow = FlowSettings::rk4(0.01).unwrap();
    let q_r = circle(20, 1.0);
    let grid = Grid::around(&q_r, 0.5, 15);
    let mut medians = Vec::new();
    for beta in [10.0, 20.0, 40.0, 80.0] {
        let th = ThermostatParams::from_beta_lambda(beta, 0.5).unwrap();
        let samples = pushforward_ensemble(&q_r, &th, &k, &flow, 50, &grid.points, 17).unwrap();
        let mut per_seed: Vec<f64> = samples.iter().map(|s| median_displacement(&grid.points, &s.points)).collect();
        medians.push(median(&mut per_seed));
    }
    let (fast, time) = within_time(start, Duration::from_secs(120));
    let list = medians.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" > ");
    outcome(strictly_decreasing(&medians) && fast, format!("median grid displacement {list} for beta 10, 20, 40, 80; {time}"))
}

fn c12_averaging_trend() -> Outcome {
    let k = GaussianKernel::new(0.5).unwrap();
    let flow = FlowSettings::rk4(0.1).unwrap();
    let th = ThermostatParams::from_beta_lambda(25.0, 0.1).unwrap();
    let base = circle(5, 0.6);
    let mut rng = RngStream::new(31, 0);
    let ensemble: Vec<LandmarkConfig> = (0..16).map(|_| perturbed(&base, 0.05, &mut rng)).collect();
    let settings = MapSettings { seed: 2, ..MapSettings::new(flow, 0.0025) };
    let m = base.coords().len();
    let mut sds = Vec::new();
    for j in [2, 4, 8, 16] {
        let data = &ensemble[..j];
        let map = map_multi(data, &th, &settings, &k).unwrap();
        let lap = laplace_multi(&map, data, &th, &settings, &k).unwrap();
        let sd = lap.landmark_sd(m, base.count(), 2);
        sds.push(sd.iter().sum::<f64>() / sd.len() as f64);
    }
    let list = sds.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" > ");
    outcome(strictly_decreasing(&sds), format!("mean Laplace SD {list} for J = 2, 4, 8, 16"))
}

fn gradient_check<O: SplitObjective>(obj: &O, x: &DVector<f64>) -> f64 {
    let (_, g) = obj.value_grad(x).unwrap();
    let fd = fd_gradient(|y| obj.value(y).unwrap(), x, 1e-5);
    (&g - &fd).norm() / fd.norm().max(1e-8)
}

fn c13_gradients() -> Outcome {
    let k = GaussianKernel::new(0.5).unwrap();
    let flow = FlowSettings::rk4(0.05).unwrap();
    let mut rng = RngStream::new(41, 0);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let beta = 5.0 + 40.0 * rng.uniform();
        let lambda = 0.02 + 0.5 * rng.uniform();
        let delta2 = 0.005 + 0.05 * rng.uniform();
        let data: Vec<LandmarkConfig> = (0..3).map(|_| perturbed(&circle(3, 0.5), 0.15, &mut rng)).collect();
        let m = 6;
        let first = FirstSplitting::new(&data[0], &data[1], beta, delta2, flow, &k).unwrap();
        let x = DVector::from_iterator(2 * m, rng.gaussian_vector(m).iter().map(|v| 0.3 * v).chain(data[0].coords().iter().copied()));
        worst[0] = worst[0].max(gradient_check(&first, &x));
        let second = SecondSplitting::new(&data[0], &data[1], beta, lambda, delta2, flow, &k).unwrap();
        let mid = arithmetic_mean(&data[..2]);
        let x = DVector::from_iterator(
            3 * m,
            rng.gaussian_vector(m).iter().map(|v| 0.3 * v).chain(mid.coords().iter().copied()).chain(rng.gaussian_vector(m).iter().map(|v| 0.3 * v)),
        );
        worst[1] = worst[1].max(gradient_check(&second, &x));
        let multi = MultiSplitting::new(&data, beta, lambda, delta2, flow, &k).unwrap();
        let mean = arithmetic_mean(&data);
        let mut x = rng.gaussian_vector(multi.dim()) * 0.3;
        x.rows_mut(m, m).copy_from(mean.coords());
        worst[2] = worst[2].max(gradient_check(&multi, &x));
    }
    outcome(
        worst.iter().all(|w| *w < 1e-4),
        format!("worst relative gradient error: first {:.2e}, two-set {:.2e}, multi-set {:.2e} (< 1e-4)", worst[0], worst[1], worst[2]),
    )
}

fn csv_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn c14_cli_replay() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("pair.json");
    let pts = |r: f64, s: f64| (0..6).map(|i| {
        let t = std::f64::consts::TAU * i as f64 / 6.0;
        format!("[{},{}]", r * t.cos(), s * r * t.sin())
    }).collect::<Vec<_>>().join(",");
    std::fs::write(&input, format!(r#"{{"version":1,"d":2,"sets":{{"reference":[{}],"target":[{}]}}}}"#, pts(0.6, 1.0), pts(0.8, 0.7))).unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, "input = \"pair.json\"\nh = 0.05\nsamples = 6\ngrid = 6\nbetas = [10.0, 40.0]\n").unwrap();
    let mut failures = Vec::new();
    for kind in [CommandKind::SamplePrior, CommandKind::LinearPosterior, CommandKind::Register] {
        let first = tmp.path().join(format!("{}-a", kind.name()));
        let o = Overrides { config: Some(config.clone()), out: Some(first.clone()), seed: Some(1234), ..Default::default() };
        let code_a = run_command(kind, &o).unwrap();
        let second = tmp.path().join(format!("{}-b", kind.name()));
        let replay = Overrides { config: Some(first.join("manifest.json")), out: Some(second.clone()), ..Default::default() };
        let code_b = run_command(kind, &replay).unwrap();
        let (a, b) = (csv_outputs(&first), csv_outputs(&second));
        if a.is_empty() || a != b || code_a != code_b {
            failures.push(kind.name());
        }
    }
    outcome(failures.is_empty(), format!("manifest replays of sample-prior, linear-posterior, register; mismatches: {failures:?}"))
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 14] = [
        ("Hamiltonian conservation", c1_hamiltonian_conservation),
        ("exact registration", c2_exact_registration),
        ("Euler-Maruyama strong order", c3_em_strong_order),
        ("OU transition moments", c4_ou_exactness),
        ("Gibbs invariance", c5_gibbs_invariance),
        ("joint covariance recursions", c6_recursions),
        ("Gaussian conditioning", c7_conditioning),
        ("limits of the averages", c8_limits),
        ("two-set objective bound", c9_trivial_bound),
        ("momentum conservation", c10_momentum_conservation),
        ("prior smoothing in beta", c11_prior_smoothing),
        ("averaging trend in J", c12_averaging_trend),
        ("objective gradients", c13_gradients),
        ("CLI replay", c14_cli_replay),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| f == &id) {
            continue;
        }
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !result.pass {
            failed += 1;
        }
        println!("criterion {:>2} {} [{}]: {}", i + 1, if result.pass { "PASS" } else { "FAIL" }, name, result.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
