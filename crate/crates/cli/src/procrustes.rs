//! Orthogonal Procrustes alignment of landmark sets onto the first set.

use landreg_core::LandmarkConfig;
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};

/// `x ↦ R (x − c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTransform {
    pub centre: Vec<f64>,
    pub rotation: DMatrix<f64>,
}

impl AlignTransform {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_iterator(x.len(), x.iter().zip(&self.centre).map(|(a, c)| a - c));
        (&self.rotation * v).iter().copied().collect()
    }
}

fn centred(set: &LandmarkConfig) -> (Vec<f64>, DMatrix<f64>) {
    let (d, n) = (set.dim(), set.count());
    let pts = DMatrix::from_column_slice(d, n, set.coords().as_slice());
    let centre: Vec<f64> = (0..d).map(|a| pts.row(a).mean()).collect();
    let mut c = pts;
    for a in 0..d {
        c.row_mut(a).add_scalar_mut(-centre[a]);
    }
    (centre, c)
}

/// Centres every set and rotates sets `2..J` by the proper rotation that
/// minimises the Frobenius distance to the first.
pub fn procrustes_align(sets: &[LandmarkConfig]) -> CliResult<(Vec<LandmarkConfig>, Vec<AlignTransform>)> {
    let first = sets.first().ok_or_else(|| CliError::input("alignment needs at least one set"))?;
    let d = first.dim();
    if sets.iter().any(|s| s.dim() != d || s.count() != first.count()) {
        return Err(CliError::input("alignment needs sets of a common shape"));
    }
    let (_, target) = centred(first);
    let mut out = Vec::with_capacity(sets.len());
    let mut transforms = Vec::with_capacity(sets.len());
    for (j, set) in sets.iter().enumerate() {
        let (centre, x) = centred(set);
        if x.norm() <= 1e-12 * (1.0 + set.coords().amax()) {
            return Err(CliError::input(format!("alignment failed: set {} has coincident landmarks", j + 1)));
        }
        let rotation = if j == 0 { DMatrix::identity(d, d) } else { best_rotation(&target, &x) };
        let aligned = &rotation * x;
        out.push(LandmarkConfig::new(d, DVector::from_column_slice(aligned.as_slice()))?);
        transforms.push(AlignTransform { centre, rotation });
    }
    Ok((out, transforms))
}

/// `argmin_R ‖R X − A‖_F` over rotations, for centred `d × N` point matrices.
fn best_rotation(a: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = (a * x.transpose()).svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = a.nrows();
    let mut s = DMatrix::identity(d, d);
    if (&u * &v_t).determinant() < 0.0 {
        s[(d - 1, d - 1)] = -1.0;
    }
    u * s * v_t
}
