use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{flow_end, FlowSettings};
use crate::kernel::{grad_hamiltonian, hamiltonian, hess_hamiltonian, kernel_matrix_flat, kron_apply, kron_identity, Kernel, LandmarkConfig, PhaseState};
use crate::numerics::{fd_jacobian, FiniteDifference, SpectralDecomp};

/// Central-difference step for flow Jacobians.
pub const FLOW_FD_STEP: f64 = 1e-5;

/// Finite-difference step for derivatives of the kernel matrix exponential.
pub const EXPM_FD_STEP: f64 = 1e-6;

/// A smooth objective over a flat parameter vector with a Gauss–Newton
/// curvature surrogate.
pub trait SplitObjective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>) -> Result<f64>;

    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    /// Gauss–Newton approximation of the Hessian at `x`.
    fn curvature(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// `e^{−λ𝒢(q)}` via the spectral decomposition of `𝒢(q)`.
pub fn matrix_exp_kernel<K: Kernel>(q: &LandmarkConfig, lambda: f64, k: &K) -> DMatrix<f64> {
    expm_flat(q.dim(), q.coords(), lambda, k)
}

fn expm_flat<K: Kernel>(dim: usize, q: &DVector<f64>, lambda: f64, k: &K) -> DMatrix<f64> {
    let g = kernel_matrix_flat(dim, q, k);
    if lambda == 0.0 {
        return DMatrix::identity(g.nrows(), g.nrows());
    }
    SpectralDecomp::new(&g).map(|l| (-lambda * l).exp())
}

/// Directional derivative of `q ↦ e^{−λ𝒢(q)}` along `dir`, by central
/// differences of the whole map.
pub fn matrix_exp_kernel_derivative<K: Kernel>(q: &LandmarkConfig, lambda: f64, k: &K, dir: &DVector<f64>) -> Result<DMatrix<f64>> {
    if dir.len() != q.coords().len() {
        return Err(Error::DimensionMismatch("direction must match the landmark vector".into()));
    }
    let e = EXPM_FD_STEP;
    let plus = expm_flat(q.dim(), &(q.coords() + dir * e), lambda, k);
    let minus = expm_flat(q.dim(), &(q.coords() - dir * e), lambda, k);
    Ok((plus - minus) / (2.0 * e))
}

/// `∂/∂q [(e^{−λ𝒢(q)} ⊗ I) p]`, one central difference per coordinate of `q`.
fn expm_apply_jacobian<K: Kernel>(dim: usize, q: &DVector<f64>, p: &DVector<f64>, lambda: f64, k: &K) -> DMatrix<f64> {
    let f = |x: &DVector<f64>| -> std::result::Result<DVector<f64>, ()> { Ok(kron_apply(&expm_flat(dim, x, lambda, k), dim, p)) };
    let fx = f(q).expect("infallible");
    fd_jacobian(f, q, &fx, FiniteDifference::Central { step: EXPM_FD_STEP }).expect("infallible")
}

/// Endpoint positions of the flow from `(p, q)` over `duration`.
pub(crate) fn flow_positions<K: Kernel>(dim: usize, p: &DVector<f64>, q: &DVector<f64>, duration: f64, flow: &FlowSettings, k: &K) -> Result<DVector<f64>> {
    let z = PhaseState { dim, p: p.clone(), q: q.clone() };
    Ok(flow_end(&z, duration, flow, k)?.q)
}

/// Endpoint positions and their Jacobian with respect to `[p, q]`
/// (central differences, `dN × 2dN`).
pub(crate) fn flow_jacobian<K: Kernel>(
    dim: usize,
    p: &DVector<f64>,
    q: &DVector<f64>,
    duration: f64,
    flow: &FlowSettings,
    k: &K,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = p.len();
    let end = flow_positions(dim, p, q, duration, flow, k)?;
    let z = PhaseState { dim, p: p.clone(), q: q.clone() }.to_vector();
    let f = |x: &DVector<f64>| flow_positions(dim, &x.rows(0, m).into_owned(), &x.rows(m, m).into_owned(), duration, flow, k);
    let jac = fd_jacobian(f, &z, &end, FiniteDifference::Central { step: FLOW_FD_STEP })?;
    Ok((end, jac))
}

fn check_data(sets: &[&LandmarkConfig]) -> Result<(usize, usize)> {
    let first = sets[0];
    if sets.iter().any(|s| s.dim() != first.dim() || s.count() != first.count()) {
        return Err(Error::DimensionMismatch("landmark sets differ in shape".into()));
    }
    Ok((first.dim(), first.coords().len()))
}

fn check_delta(delta2: f64) -> Result<()> {
    if !(delta2 > 0.0 && delta2.is_finite()) {
        return Err(Error::InvalidParameter(format!("observation variance must be positive, got {delta2}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("the coupling weight needs lambda > 0, got {lambda}")));
    }
    Ok(())
}

/// `F(p₀, q₀) = βH + (‖qʳ − q₀‖² + ‖qᵗ − S_q(1; 0, [p₀, q₀])‖²)/(2δ²)`
/// over `x = [p₀, q₀]`.
pub struct FirstSplitting<'a, K: Kernel> {
    pub q_r: &'a LandmarkConfig,
    pub q_t: &'a LandmarkConfig,
    pub beta: f64,
    pub delta2: f64,
    pub flow: FlowSettings,
    pub kernel: &'a K,
}

impl<'a, K: Kernel> FirstSplitting<'a, K> {
    pub fn new(q_r: &'a LandmarkConfig, q_t: &'a LandmarkConfig, beta: f64, delta2: f64, flow: FlowSettings, kernel: &'a K) -> Result<Self> {
        check_data(&[q_r, q_t])?;
        check_delta(delta2)?;
        flow.steps_for(1.0)?;
        Ok(FirstSplitting { q_r, q_t, beta, delta2, flow, kernel })
    }

    fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.q_r.coords().len();
        (x.rows(0, m).into_owned(), x.rows(m, m).into_owned())
    }

    fn state(&self, x: &DVector<f64>) -> PhaseState {
        let (p, q) = self.split(x);
        PhaseState { dim: self.q_r.dim(), p, q }
    }

    /// `S_q(1; 0, [p₀, q₀])`.
    pub fn endpoint(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (p, q) = self.split(x);
        flow_positions(self.q_r.dim(), &p, &q, 1.0, &self.flow, self.kernel)
    }

    /// Jacobian of the endpoint with respect to `[p₀, q₀]`.
    pub fn endpoint_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (p, q) = self.split(x);
        Ok(flow_jacobian(self.q_r.dim(), &p, &q, 1.0, &self.flow, self.kernel)?.1)
    }
}

impl<K: Kernel> SplitObjective for FirstSplitting<'_, K> {
    fn dim(&self) -> usize {
        2 * self.q_r.coords().len()
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let z = self.state(x);
        let end = self.endpoint(x)?;
        let misfit = (self.q_r.coords() - &z.q).norm_squared() + (self.q_t.coords() - end).norm_squared();
        Ok(self.beta * hamiltonian(&z, self.kernel) + misfit / (2.0 * self.delta2))
    }

    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let z = self.state(x);
        let m = z.p.len();
        let (end, jac) = flow_jacobian(z.dim, &z.p, &z.q, 1.0, &self.flow, self.kernel)?;
        let r0 = &z.q - self.q_r.coords();
        let r1 = &end - self.q_t.coords();
        let value = self.beta * hamiltonian(&z, self.kernel) + (r0.norm_squared() + r1.norm_squared()) / (2.0 * self.delta2);
        let (gp, gq) = grad_hamiltonian(&z, self.kernel);
        let mut grad = jac.transpose() * &r1 / self.delta2;
        let mut gp_view = grad.rows_mut(0, m);
        gp_view += gp * self.beta;
        let mut gq_view = grad.rows_mut(m, m);
        gq_view += gq * self.beta + r0 / self.delta2;
        Ok((value, grad))
    }

    fn curvature(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let z = self.state(x);
        let m = z.p.len();
        let jac = self.endpoint_jacobian(x)?;
        let mut c = hess_hamiltonian(&z, self.kernel).to_full() * self.beta + jac.transpose() * &jac / self.delta2;
        for i in m..2 * m {
            c[(i, i)] += 1.0 / self.delta2;
        }
        Ok(c)
    }
}

/// Two-set objective over `x = [p, q, p̃]` at `t = ½`:
/// `βH(p, q) + (β/4λ)‖p̃ − E(q)p‖² + (‖qʳ − S_q(½; [−p, q])‖² + ‖qᵗ − S_q(½; [p̃, q])‖²)/(2δ²)`
/// with `E(q) = e^{−λ𝒢(q)} ⊗ I`.
pub struct SecondSplitting<'a, K: Kernel> {
    pub q_r: &'a LandmarkConfig,
    pub q_t: &'a LandmarkConfig,
    pub beta: f64,
    pub lambda: f64,
    pub delta2: f64,
    pub flow: FlowSettings,
    pub kernel: &'a K,
}

impl<'a, K: Kernel> SecondSplitting<'a, K> {
    pub fn new(
        q_r: &'a LandmarkConfig,
        q_t: &'a LandmarkConfig,
        beta: f64,
        lambda: f64,
        delta2: f64,
        flow: FlowSettings,
        kernel: &'a K,
    ) -> Result<Self> {
        check_data(&[q_r, q_t])?;
        check_delta(delta2)?;
        check_lambda(lambda)?;
        flow.steps_for(0.5)?;
        Ok(SecondSplitting { q_r, q_t, beta, lambda, delta2, flow, kernel })
    }

    fn parts(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let m = self.q_r.coords().len();
        (x.rows(0, m).into_owned(), x.rows(m, m).into_owned(), x.rows(2 * m, m).into_owned())
    }

    /// The shapes reached from the midpoint toward each data set.
    pub fn endpoints(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (p, q, pt) = self.parts(x);
        let d = self.q_r.dim();
        Ok((
            flow_positions(d, &(-&p), &q, 0.5, &self.flow, self.kernel)?,
            flow_positions(d, &pt, &q, 0.5, &self.flow, self.kernel)?,
        ))
    }

    fn coupling(&self, p: &DVector<f64>, q: &DVector<f64>, pt: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let e = expm_flat(self.q_r.dim(), q, self.lambda, self.kernel);
        let c = pt - kron_apply(&e, self.q_r.dim(), p);
        (e, c)
    }
}

impl<K: Kernel> SplitObjective for SecondSplitting<'_, K> {
    fn dim(&self) -> usize {
        3 * self.q_r.coords().len()
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let (p, q, pt) = self.parts(x);
        let d = self.q_r.dim();
        let (_, c) = self.coupling(&p, &q, &pt);
        let (er, et) = self.endpoints(x)?;
        let h = hamiltonian(&PhaseState { dim: d, p, q }, self.kernel);
        let misfit = (self.q_r.coords() - er).norm_squared() + (self.q_t.coords() - et).norm_squared();
        Ok(self.beta * h + self.beta / (4.0 * self.lambda) * c.norm_squared() + misfit / (2.0 * self.delta2))
    }

    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (p, q, pt) = self.parts(x);
        let d = self.q_r.dim();
        let m = p.len();
        let k = self.kernel;
        let (e, c) = self.coupling(&p, &q, &pt);
        let (er, jr) = flow_jacobian(d, &(-&p), &q, 0.5, &self.flow, k)?;
        let (et, jt) = flow_jacobian(d, &pt, &q, 0.5, &self.flow, k)?;
        let rr = er - self.q_r.coords();
        let rt = et - self.q_t.coords();
        let z = PhaseState { dim: d, p: p.clone(), q: q.clone() };
        let w = self.beta / (2.0 * self.lambda);
        let value = self.beta * hamiltonian(&z, k)
            + self.beta / (4.0 * self.lambda) * c.norm_squared()
            + (rr.norm_squared() + rt.norm_squared()) / (2.0 * self.delta2);

        let (gp, gq) = grad_hamiltonian(&z, k);
        let je = expm_apply_jacobian(d, &q, &p, self.lambda, k);
        let jr_t = jr.transpose() * &rr / self.delta2;
        let jt_t = jt.transpose() * &rt / self.delta2;
        let mut grad = DVector::zeros(3 * m);
        grad.rows_mut(0, m).copy_from(&(gp * self.beta - kron_apply(&e, d, &c) * w - jr_t.rows(0, m)));
        grad.rows_mut(m, m)
            .copy_from(&(gq * self.beta - je.transpose() * &c * w + jr_t.rows(m, m) + jt_t.rows(m, m)));
        grad.rows_mut(2 * m, m).copy_from(&(&c * w + jt_t.rows(0, m)));
        Ok((value, grad))
    }

    fn curvature(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (p, q, pt) = self.parts(x);
        let d = self.q_r.dim();
        let m = p.len();
        let k = self.kernel;
        let mut c = DMatrix::zeros(3 * m, 3 * m);
        let z = PhaseState { dim: d, p: p.clone(), q: q.clone() };
        c.view_mut((0, 0), (2 * m, 2 * m)).copy_from(&(hess_hamiltonian(&z, k).to_full() * self.beta));

        let e = expm_flat(d, &q, self.lambda, k);
        let mut jc = DMatrix::zeros(m, 3 * m);
        jc.view_mut((0, 0), (m, m)).copy_from(&(-kron_identity(&e, d)));
        jc.view_mut((0, m), (m, m)).copy_from(&(-expm_apply_jacobian(d, &q, &p, self.lambda, k)));
        jc.view_mut((0, 2 * m), (m, m)).fill_with_identity();
        c += jc.transpose() * &jc * (self.beta / (2.0 * self.lambda));

        let (_, jr) = flow_jacobian(d, &(-&p), &q, 0.5, &self.flow, k)?;
        let (_, jt) = flow_jacobian(d, &pt, &q, 0.5, &self.flow, k)?;
        let mut jd = DMatrix::zeros(2 * m, 3 * m);
        jd.view_mut((0, 0), (m, m)).copy_from(&(-jr.columns(0, m)));
        jd.view_mut((0, m), (m, m)).copy_from(&jr.columns(m, m));
        jd.view_mut((m, m), (m, m)).copy_from(&jt.columns(m, m));
        jd.view_mut((m, 2 * m), (m, m)).copy_from(&jt.columns(0, m));
        c += jd.transpose() * &jd / self.delta2;
        Ok(c)
    }
}

/// Multi-set objective over `x = [p*, q*, p¹, …, pᴶ]`:
/// `βH(p*, q*) + (β/4λ)Σ‖pʲ − E(q*)p*‖² + Σ‖qʲ − S_q(½; [pʲ, q*])‖²/(2δ²)`.
pub struct MultiSplitting<'a, K: Kernel> {
    pub data: &'a [LandmarkConfig],
    pub beta: f64,
    pub lambda: f64,
    pub delta2: f64,
    pub flow: FlowSettings,
    pub kernel: &'a K,
}

impl<'a, K: Kernel> MultiSplitting<'a, K> {
    pub fn new(data: &'a [LandmarkConfig], beta: f64, lambda: f64, delta2: f64, flow: FlowSettings, kernel: &'a K) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidParameter(format!("need at least two landmark sets, got {}", data.len())));
        }
        check_data(&data.iter().collect::<Vec<_>>())?;
        check_delta(delta2)?;
        check_lambda(lambda)?;
        flow.steps_for(0.5)?;
        Ok(MultiSplitting { data, beta, lambda, delta2, flow, kernel })
    }

    fn m(&self) -> usize {
        self.data[0].coords().len()
    }

    fn block(&self, x: &DVector<f64>, b: usize) -> DVector<f64> {
        x.rows(b * self.m(), self.m()).into_owned()
    }

    /// Shapes reached from `q*` with each set's momentum.
    pub fn endpoints(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let q = self.block(x, 1);
        let d = self.data[0].dim();
        (0..self.data.len())
            .map(|j| flow_positions(d, &self.block(x, 2 + j), &q, 0.5, &self.flow, self.kernel))
            .collect()
    }
}

impl<K: Kernel> SplitObjective for MultiSplitting<'_, K> {
    fn dim(&self) -> usize {
        (self.data.len() + 2) * self.m()
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let (p, q) = (self.block(x, 0), self.block(x, 1));
        let d = self.data[0].dim();
        let ep = kron_apply(&expm_flat(d, &q, self.lambda, self.kernel), d, &p);
        let ends = self.endpoints(x)?;
        let mut coupling = 0.0;
        let mut misfit = 0.0;
        for (j, end) in ends.iter().enumerate() {
            coupling += (self.block(x, 2 + j) - &ep).norm_squared();
            misfit += (self.data[j].coords() - end).norm_squared();
        }
        let h = hamiltonian(&PhaseState { dim: d, p, q }, self.kernel);
        Ok(self.beta * h + self.beta / (4.0 * self.lambda) * coupling + misfit / (2.0 * self.delta2))
    }

    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (p, q) = (self.block(x, 0), self.block(x, 1));
        let d = self.data[0].dim();
        let m = self.m();
        let k = self.kernel;
        let w = self.beta / (2.0 * self.lambda);
        let e = expm_flat(d, &q, self.lambda, k);
        let ep = kron_apply(&e, d, &p);
        let je = expm_apply_jacobian(d, &q, &p, self.lambda, k);
        let z = PhaseState { dim: d, p: p.clone(), q: q.clone() };
        let (gp, gq) = grad_hamiltonian(&z, k);

        let mut grad = DVector::zeros(self.dim());
        let mut c_sum = DVector::zeros(m);
        let mut gq_total = gq * self.beta;
        let mut value = self.beta * hamiltonian(&z, k);
        for (j, data) in self.data.iter().enumerate() {
            let pj = self.block(x, 2 + j);
            let c = &pj - &ep;
            let (end, jac) = flow_jacobian(d, &pj, &q, 0.5, &self.flow, k)?;
            let r = end - data.coords();
            value += self.beta / (4.0 * self.lambda) * c.norm_squared() + r.norm_squared() / (2.0 * self.delta2);
            let jr = jac.transpose() * &r / self.delta2;
            grad.rows_mut((2 + j) * m, m).copy_from(&(&c * w + jr.rows(0, m)));
            gq_total += jr.rows(m, m);
            c_sum += c;
        }
        gq_total -= je.transpose() * &c_sum * w;
        grad.rows_mut(0, m).copy_from(&(gp * self.beta - kron_apply(&e, d, &c_sum) * w));
        grad.rows_mut(m, m).copy_from(&gq_total);
        Ok((value, grad))
    }

    fn curvature(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (p, q) = (self.block(x, 0), self.block(x, 1));
        let d = self.data[0].dim();
        let m = self.m();
        let n = self.dim();
        let k = self.kernel;
        let mut c = DMatrix::zeros(n, n);
        let z = PhaseState { dim: d, p: p.clone(), q: q.clone() };
        c.view_mut((0, 0), (2 * m, 2 * m)).copy_from(&(hess_hamiltonian(&z, k).to_full() * self.beta));

        let e = kron_identity(&expm_flat(d, &q, self.lambda, k), d);
        let je = expm_apply_jacobian(d, &q, &p, self.lambda, k);
        let w = self.beta / (2.0 * self.lambda);
        for j in 0..self.data.len() {
            let mut jc = DMatrix::zeros(m, n);
            jc.view_mut((0, 0), (m, m)).copy_from(&(-&e));
            jc.view_mut((0, m), (m, m)).copy_from(&(-&je));
            jc.view_mut((0, (2 + j) * m), (m, m)).fill_with_identity();
            c += jc.transpose() * &jc * w;

            let (_, jac) = flow_jacobian(d, &self.block(x, 2 + j), &q, 0.5, &self.flow, k)?;
            let mut jd = DMatrix::zeros(m, n);
            jd.view_mut((0, m), (m, m)).copy_from(&jac.columns(m, m));
            jd.view_mut((0, (2 + j) * m), (m, m)).copy_from(&jac.columns(0, m));
            c += jd.transpose() * &jd / self.delta2;
        }
        Ok(c)
    }
}
