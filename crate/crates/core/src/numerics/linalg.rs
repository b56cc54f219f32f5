//! Dense symmetric linear algebra: Cholesky, eigendecomposition, PSD
//! projection and the symmetric matrix exponential.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues below this fraction of the largest one are treated as zero.
pub const CLIP_RELATIVE: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    /// Column at which the factorisation broke down.
    pub column: usize,
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
}

pub(crate) fn assert_symmetric(a: &DMatrix<f64>) {
    assert!(a.is_square(), "matrix must be square, got {}x{}", a.nrows(), a.ncols());
    let scale = a.amax().max(1.0);
    for i in 0..a.nrows() {
        for j in 0..i {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            assert!(x.is_finite() && y.is_finite(), "matrix has non-finite entries");
            assert!(
                (x - y).abs() <= SYMMETRY_TOL * scale,
                "matrix is not symmetric at ({i}, {j}): {x} vs {y}"
            );
        }
    }
}

/// Copies the lower triangle onto the upper one so the result is
/// symmetric bit for bit.
pub fn mirror_lower(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// Averages `A` with its transpose in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn cholesky(a: &DMatrix<f64>) -> Result<CholeskyFactor, NotPositiveDefinite> {
    assert_symmetric(a);
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max);
    let floor = (n.max(1) as f64) * f64::EPSILON * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > floor) {
            return Err(NotPositiveDefinite { column: j });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(CholeskyFactor { l })
}

impl CholeskyFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solves `L X = B` column by column.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col = self.solve(&b.column(c).into_owned());
            x.set_column(c, &col);
        }
        x
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SpectralDecomp {
    pub fn new(a: &DMatrix<f64>) -> Self {
        assert_symmetric(a);
        let n = a.nrows();
        if n == 0 {
            return SpectralDecomp { values: DVector::zeros(0), vectors: DMatrix::zeros(0, 0) };
        }
        let eig = SymmetricEigen::new(a.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        SpectralDecomp { values, vectors }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Rebuilds `V diag(f(λ)) Vᵀ`, exactly symmetric.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..n {
            let s = f(self.values[k]);
            scaled.column_mut(k).scale_mut(s);
        }
        let mut out = &scaled * self.vectors.transpose();
        symmetrize(&mut out);
        out
    }

    /// Eigenvalues at or below `CLIP_RELATIVE · λ_max` (including every
    /// negative one) count as discarded.
    pub fn clip_threshold(&self) -> f64 {
        CLIP_RELATIVE * self.max_value().max(0.0)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map(|x| x)
    }
}

/// Which matrix `psd_project` should return from the clipped spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsdMode {
    /// The projected matrix itself.
    Project,
    /// The Moore–Penrose inverse on the retained spectrum.
    PseudoInverse,
}

#[derive(Debug, Clone)]
pub struct PsdResult {
    pub matrix: DMatrix<f64>,
    /// Number of eigenvalues kept.
    pub retained: usize,
    /// Sum of |λ| over discarded eigenvalues divided by the sum of |λ|.
    pub discarded_fraction: f64,
}

pub fn psd_project(a: &DMatrix<f64>, mode: PsdMode) -> PsdResult {
    let spec = SpectralDecomp::new(a);
    psd_from_spectrum(&spec, mode)
}

pub fn psd_from_spectrum(spec: &SpectralDecomp, mode: PsdMode) -> PsdResult {
    let thr = spec.clip_threshold();
    let keep = |x: f64| x > thr && x > 0.0;
    let retained = spec.values.iter().filter(|&&x| keep(x)).count();
    let total: f64 = spec.values.iter().map(|x| x.abs()).sum();
    let dropped: f64 = spec.values.iter().filter(|&&x| !keep(x)).map(|x| x.abs()).sum();
    let matrix = match mode {
        PsdMode::Project => spec.map(|x| if keep(x) { x } else { 0.0 }),
        PsdMode::PseudoInverse => spec.map(|x| if keep(x) { 1.0 / x } else { 0.0 }),
    };
    PsdResult {
        matrix,
        retained,
        discarded_fraction: if total > 0.0 { dropped / total } else { 0.0 },
    }
}

/// `exp(scale · A)` for symmetric `A` via its eigendecomposition.
pub fn sym_expm(a: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    SpectralDecomp::new(a).map(|x| (scale * x).exp())
}
