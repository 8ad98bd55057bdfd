//! Dense linear algebra, PSD matrix functions and Gaussian expectations
//! shared by the rest of the crate.

mod matrix;
mod quadrature;

pub use matrix::{
    column_space_projector, numerical_rank, op_norm, psd_pinv_sqrt, psd_sqrt, relative_residual, PsdFactors, SymPsd,
    DEFAULT_RANK_TOL, PSD_TOL,
};
pub use quadrature::{
    affine_into, auto_quadrature, build_quadrature, expectation_with_factor, gauss_expectation, gauss_hermite,
    gauss_legendre_unit, Expectation, GaussianMeasure, QuadratureKind, QuadratureRule, AUTO_TENSOR_DIM,
    MAX_TENSOR_DIM,
};
#[allow(unused_imports)]
pub(crate) use quadrature::mc_summary;

use crate::error::{Error, Result};

/// Eigenvalues `lambda_1 <= lambda_2 <= ...` of `-A` on a truncated basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::ConfigInvalid("spectral basis needs at least one mode".into()));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::ConfigInvalid("eigenvalues must be strictly positive".into()));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::ConfigInvalid("eigenvalues must be nondecreasing".into()));
        }
        Ok(SpectralBasis { eigenvalues })
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}
