//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub max_iterations: usize,
    /// Converged once `‖g‖ ≤ max(gtol_abs, gtol_rel·|f|)`.
    pub gtol_abs: f64,
    pub gtol_rel: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iterations: 1000,
            gtol_abs: 1e-6,
            gtol_rel: 1e-6,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    /// No step along steepest descent produced sufficient decrease.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.status == LbfgsStatus::Converged
    }
}

/// Minimises `f`, which returns value and gradient or `None` where it is
/// undefined (treated as +∞ by the line search).
///
/// Panics if `f` is undefined at `x0`.
pub fn lbfgs_minimise<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let (mut fx, mut g) = f(&x0).expect("objective undefined at the starting point");
    let mut x = x0;
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let tol = |fx: f64| opts.gtol_abs.max(opts.gtol_rel * fx.abs());

    let mut iterations = 0;
    let status = loop {
        if g.norm() <= tol(fx) {
            break LbfgsStatus::Converged;
        }
        if iterations >= opts.max_iterations {
            break LbfgsStatus::MaxIterations;
        }

        let mut step = None;
        // Quasi-Newton direction first; on failure drop memory and retry
        // along steepest descent.
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let mut dir = two_loop(&g, &pairs);
            let mut slope = g.dot(&dir);
            if !(slope < 0.0) {
                dir = -&g;
                slope = -g.norm_squared();
            }
            let mut alpha = if pairs.is_empty() { (1.0 / g.norm()).min(1.0) } else { 1.0 };
            for _ in 0..opts.max_backtracks {
                let trial = &x + &dir * alpha;
                if let Some((ft, gt)) = f(&trial) {
                    let armijo = ft <= fx + opts.c1 * alpha * slope && ft < fx;
                    // Near the optimum f stalls at round-off; progress in ‖g‖ still counts.
                    let flat = (ft - fx).abs() <= 1e-14 * fx.abs().max(1.0) && gt.norm() < g.norm();
                    if ft.is_finite() && (armijo || flat) {
                        step = Some((trial, ft, gt));
                        break;
                    }
                }
                alpha *= opts.backtrack;
            }
            if step.is_some() {
                break;
            }
        }

        let Some((x_new, f_new, g_new)) = step else {
            break LbfgsStatus::LineSearchFailed;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
    };

    LbfgsResult { x, value: fx, gradient: g, iterations, status }
}

fn two_loop(g: &DVector<f64>, pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn solves_spd_quadratic() {
        let n = 20;
        let mut rng = crate::numerics::RngStream::new(17, 0);
        let b_mat = DMatrix::from_fn(n, n, |_, _| rng.gaussian());
        let a = &b_mat * b_mat.transpose() + DMatrix::identity(n, n) * (n as f64);
        let b = rng.gaussian_vector(n);
        let opts = LbfgsOptions { gtol_abs: 1e-11, gtol_rel: 0.0, max_iterations: 50, ..Default::default() };
        let res = lbfgs_minimise(
            |x| Some((0.5 * x.dot(&(&a * x)) - b.dot(x), &a * x - &b)),
            DVector::zeros(n),
            &opts,
        );
        assert!(res.converged(), "{:?} after {}", res.status, res.iterations);
        assert!(res.iterations <= 50);
        let exact = a.clone().lu().solve(&b).unwrap();
        assert!((res.x - exact).amax() < 1e-8);
    }

    #[test]
    fn rosenbrock() {
        let rosen = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            Some((f, g))
        };
        let opts = LbfgsOptions { gtol_abs: 1e-10, gtol_rel: 0.0, ..Default::default() };
        let res = lbfgs_minimise(rosen, DVector::from_vec(vec![-1.2, 1.0]), &opts);
        assert!(res.converged());
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6, "{}", res.x);
    }

    #[test]
    fn already_at_minimum() {
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let c = x0.clone();
        let res = lbfgs_minimise(
            |x| Some(((x - &c).norm_squared(), (x - &c) * 2.0)),
            x0.clone(),
            &LbfgsOptions::default(),
        );
        assert_eq!(res.iterations, 0);
        assert_eq!(res.x, x0);
        assert!(res.converged());
    }

    #[test]
    fn accepted_values_strictly_decrease() {
        let mut history = Vec::new();
        let res = lbfgs_minimise(
            |x: &DVector<f64>| {
                let f = x.iter().map(|v| v.powi(4) + v * v).sum::<f64>();
                history.push(f);
                Some((f, x.map(|v| 4.0 * v.powi(3) + 2.0 * v)))
            },
            DVector::from_vec(vec![2.0, -1.5, 0.7]),
            &LbfgsOptions { gtol_abs: 1e-12, gtol_rel: 0.0, ..Default::default() },
        );
        assert!(res.converged());
        assert!(res.value < history[0]);
    }

    #[test]
    fn undefined_region_is_avoided() {
        // f = (x-3)^2 only defined for x < 4; start far left so the first
        // trial overshoots into the undefined region.
        let res = lbfgs_minimise(
            |x: &DVector<f64>| {
                if x[0] >= 4.0 {
                    None
                } else {
                    Some(((x[0] - 3.0).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 3.0)])))
                }
            },
            DVector::from_vec(vec![-100.0]),
            &LbfgsOptions { gtol_abs: 1e-9, gtol_rel: 0.0, ..Default::default() },
        );
        assert!(res.converged());
        assert!((res.x[0] - 3.0).abs() < 1e-8);
    }
}
