//! Symmetric PSD matrices and the matrix functions built on their
//! eigendecomposition: square root, pseudo-inverse square root,
//! pseudo-inverse and image projector.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default rank cutoff, relative to the largest eigenvalue.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Negative eigenvalues down to `-PSD_TOL * lambda_max` are clamped to zero.
pub const PSD_TOL: f64 = 1e-10;

/// A real symmetric matrix that is expected to be positive semidefinite.
///
/// Construction symmetrizes the input, so `entry(i, j) == entry(j, i)` holds
/// bit for bit. Positive semidefiniteness is checked by the operations that
/// rely on it and reported as [`Error::NotPsd`].
#[derive(Clone, Debug, PartialEq)]
pub struct SymPsd(DMatrix<f64>);

impl SymPsd {
    pub fn new(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "SymPsd requires a square matrix");
        let sym = (&m + m.transpose()) * 0.5;
        SymPsd(sym)
    }

    pub fn identity(n: usize) -> Self {
        SymPsd(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymPsd(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn zeros(n: usize) -> Self {
        SymPsd(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Eigenvalues (clamped at zero) and orthonormal eigenvectors.
    pub fn eigen(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.dim();
        if n == 0 {
            return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
        }
        let eig = SymmetricEigen::new(self.0.clone());
        let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
        let tol = PSD_TOL * scale;
        let mut vals = eig.eigenvalues;
        for v in vals.iter_mut() {
            if *v < -tol {
                return Err(Error::NotPsd { eigenvalue: *v, tolerance: tol });
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok((vals, eig.eigenvectors))
    }

    /// Verifies numerical positive semidefiniteness.
    pub fn check_psd(&self) -> Result<()> {
        self.eigen().map(|_| ())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        SymmetricEigen::new(self.0.clone())
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &v| a.min(v))
    }
}

fn spectral_function(vals: &DVector<f64>, vecs: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(vals[j]);
    }
    let out = scaled * vecs.transpose();
    (&out + out.transpose()) * 0.5
}

/// Principal square root of a PSD matrix.
pub fn psd_sqrt(m: &SymPsd) -> Result<SymPsd> {
    let (vals, vecs) = m.eigen()?;
    Ok(SymPsd(spectral_function(&vals, &vecs, f64::sqrt)))
}

/// Pseudo-inverse square root: `m^{-1/2}` on the image of `m`, zero on its
/// kernel. Eigenvalues at or below `rank_tol * lambda_max` count as kernel.
pub fn psd_pinv_sqrt(m: &SymPsd, rank_tol: f64) -> Result<(SymPsd, usize)> {
    let f = PsdFactors::new(m, rank_tol)?;
    Ok((f.pinv_sqrt, f.rank))
}

/// All the matrix functions of one PSD matrix, from a single
/// eigendecomposition.
#[derive(Clone, Debug)]
pub struct PsdFactors {
    pub sqrt: SymPsd,
    pub pinv_sqrt: SymPsd,
    pub pinv: DMatrix<f64>,
    /// Orthogonal projector onto the image.
    pub projector: DMatrix<f64>,
    pub rank: usize,
}

impl PsdFactors {
    pub fn new(m: &SymPsd, rank_tol: f64) -> Result<Self> {
        let (vals, vecs) = m.eigen()?;
        let lmax = vals.iter().fold(0.0_f64, |a, &v| a.max(v));
        let cutoff = rank_tol * lmax;
        let keep = |v: f64| lmax > 0.0 && v > cutoff;
        let rank = vals.iter().filter(|&&v| keep(v)).count();
        Ok(PsdFactors {
            sqrt: SymPsd(spectral_function(&vals, &vecs, f64::sqrt)),
            pinv_sqrt: SymPsd(spectral_function(&vals, &vecs, |v| if keep(v) { 1.0 / v.sqrt() } else { 0.0 })),
            pinv: spectral_function(&vals, &vecs, |v| if keep(v) { 1.0 / v } else { 0.0 }),
            projector: spectral_function(&vals, &vecs, |v| if keep(v) { 1.0 } else { 0.0 }),
            rank,
        })
    }

    /// Relative Frobenius norm of the part of `v` outside the image.
    pub fn image_residual(&self, v: &DMatrix<f64>) -> f64 {
        relative_residual(&self.projector, v)
    }
}

/// `|(I - proj) v|_F / |v|_F`, zero for `v = 0`.
pub fn relative_residual(projector: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let norm = v.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (v - projector * v).norm() / norm
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |a, &v| a.max(v))
}

/// Numerical rank from singular values, relative to the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0_f64, |a, &v| a.max(v));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rel_tol * smax).count()
}

/// Orthogonal projector onto the column space of `m`, from a
/// column-pivoted QR truncated at the numerical rank.
pub fn column_space_projector(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let rank = numerical_rank(m, rel_tol);
    if rank == 0 {
        return DMatrix::zeros(n, n);
    }
    let q = m.clone().col_piv_qr().q();
    let basis = q.columns(0, rank);
    &basis * basis.transpose()
}
