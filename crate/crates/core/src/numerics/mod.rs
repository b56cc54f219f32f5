//! Shared dense numerics: factorisations, spectral tools, L-BFGS,
//! finite-difference Jacobians and seedable random streams.

mod lbfgs;
mod linalg;
mod rng;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

pub use lbfgs::{lbfgs_minimise, LbfgsOptions, LbfgsResult, LbfgsStatus};
pub use linalg::{
    cholesky, mirror_lower, psd_from_spectrum, psd_project, sym_expm, symmetrize, CholeskyFactor,
    NotPositiveDefinite, PsdMode, PsdResult, SpectralDecomp, CLIP_RELATIVE,
};
pub use rng::RngStream;

/// How finite-difference Jacobian columns are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FiniteDifference {
    /// `(f(x + εe) − f(x)) / ε`, one extra evaluation per column.
    Forward { step: f64 },
    /// `(f(x + εe) − f(x − εe)) / 2ε`.
    Central { step: f64 },
}

/// Finite-difference Jacobian of `f` at `x`, columns evaluated in parallel.
///
/// `fx` must be `f(x)` when the forward scheme is used; it also fixes the
/// output dimension. Any failing evaluation fails the whole Jacobian.
pub fn fd_jacobian<F, E>(f: F, x: &DVector<f64>, fx: &DVector<f64>, scheme: FiniteDifference) -> Result<DMatrix<f64>, E>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, E> + Sync,
    E: Send,
{
    let n = x.len();
    let m = fx.len();
    let columns: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|k| match scheme {
            FiniteDifference::Forward { step } => {
                let mut xp = x.clone();
                xp[k] += step;
                let fp = f(&xp)?;
                Ok((fp - fx) / step)
            }
            FiniteDifference::Central { step } => {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += step;
                xm[k] -= step;
                let fp = f(&xp)?;
                let fm = f(&xm)?;
                Ok((fp - fm) / (2.0 * step))
            }
        })
        .collect::<Result<_, E>>()?;
    let mut jac = DMatrix::zeros(m, n);
    for (k, c) in columns.iter().enumerate() {
        jac.set_column(k, c);
    }
    Ok(jac)
}

/// Central-difference gradient of a scalar function; test and oracle use.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, step: f64) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|k| {
            let h = step * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        }),
    )
}
