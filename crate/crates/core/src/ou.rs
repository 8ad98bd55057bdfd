//! The projected Ornstein-Uhlenbeck engine.
//!
//! Every model enters the solver only through [`ProjectedModel`]: the
//! quantities of the infinite-dimensional control system composed with the
//! finite-rank projection `P`. The engine evaluates the transition semigroup
//! `R_t[phi]` on functions of the projected state, Cameron-Martin densities,
//! and samples of the projected noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::spectral::{expectation_with_factor, psd_sqrt, Expectation, PsdFactors, QuadratureRule, SymPsd};

/// The finite-dimensional face of an OU control system.
///
/// All times are strictly positive; `t = 0` is never passed to the covariance
/// methods. Implementations are immutable after construction.
pub trait ProjectedModel: Sync {
    /// Model-specific representation of a full state.
    type State;

    /// Dimension N of the image of `P`.
    fn proj_dim(&self) -> usize;

    /// Dimension m of the control space.
    fn control_dim(&self) -> usize;

    /// `P e^{tA} x` (extended to the extrapolation space). `t = 0` gives `Px`.
    fn proj_semigroup_apply(&self, t: f64, x: &Self::State) -> DVector<f64>;

    /// `P Q_t P^*`.
    fn proj_cov(&self, t: f64) -> SymPsd;

    /// `P e^{tA} C`, an N x m matrix.
    fn proj_control(&self, t: f64) -> DMatrix<f64>;

    /// `P e^{sA} Q_{t-s} e^{sA^*} P^*` for `0 < s < t`.
    fn pushforward_cov(&self, s: f64, t: f64) -> SymPsd;

    /// `P e^{sA} Q_{t-s} P^*` for `0 < s < t`.
    fn cross_cov(&self, s: f64, t: f64) -> DMatrix<f64>;

    /// `Cov(P W_A(s), P W_A(s'))`.
    fn noise_cov(&self, s: f64, s2: f64) -> DMatrix<f64>;

    /// Times at which `proj_control` jumps (delay activation times).
    fn control_breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// A bounded terminal cost `phi(x) = phi_bar(Px)`.
pub trait TerminalCost: Sync {
    fn eval(&self, y: &[f64]) -> f64;

    /// `sup |phi_bar|`.
    fn bound(&self) -> f64;
}

/// Terminal cost from a closure and a declared bound.
pub struct FnCost<F> {
    f: F,
    bound: f64,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnCost<F> {
    pub fn new(f: F, bound: f64) -> Self {
        FnCost { f, bound }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> TerminalCost for FnCost<F> {
    fn eval(&self, y: &[f64]) -> f64 {
        (self.f)(y)
    }

    fn bound(&self) -> f64 {
        self.bound
    }
}

impl<T: TerminalCost + ?Sized> TerminalCost for &T {
    fn eval(&self, y: &[f64]) -> f64 {
        (**self).eval(y)
    }

    fn bound(&self) -> f64 {
        (**self).bound()
    }
}

fn check_rule<M: ProjectedModel + ?Sized>(model: &M, rule: &QuadratureRule) -> Result<()> {
    if rule.dim() != model.proj_dim() {
        return Err(Error::DimensionMismatch { expected: model.proj_dim(), got: rule.dim() });
    }
    Ok(())
}

/// `R_t[phi](x) = E phi_bar(z + y0)`, `z ~ N(0, P Q_t P^*)`, where
/// `y0 = P e^{tA} x` has been computed by the caller.
pub fn semigroup_apply<M, C>(model: &M, phi: &C, t: f64, y0: &[f64], rule: &QuadratureRule) -> Result<Expectation>
where
    M: ProjectedModel + ?Sized,
    C: TerminalCost + ?Sized,
{
    check_rule(model, rule)?;
    if y0.len() != model.proj_dim() {
        return Err(Error::DimensionMismatch { expected: model.proj_dim(), got: y0.len() });
    }
    let l = psd_sqrt(&model.proj_cov(t))?;
    Ok(expectation_with_factor(|z| phi.eval(z), y0, l.matrix(), rule))
}

/// Cameron-Martin density of `N(y, cov)` with respect to `N(0, cov)` at `z`:
/// `exp(<cov^{-1/2} y, cov^{-1/2} z> - |cov^{-1/2} y|^2 / 2)`.
pub fn cameron_martin_density(cov: &SymPsd, y: &[f64], z: &[f64], rank_tol: f64) -> Result<f64> {
    let n = cov.dim();
    for v in [y, z] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.len() });
        }
    }
    let f = PsdFactors::new(cov, rank_tol)?;
    let y = DMatrix::from_column_slice(n, 1, y);
    let residual = f.image_residual(&y);
    if residual > 1e-8 {
        return Err(Error::NotInCameronMartin { residual });
    }
    let a = f.pinv_sqrt.matrix() * &y;
    let b = f.pinv_sqrt.matrix() * DMatrix::from_column_slice(n, 1, z);
    Ok((a.dot(&b) - 0.5 * a.norm_squared()).exp())
}

/// Exact sampler for a centred Gaussian path `(X_1, .., X_L)` in R^N with
/// block covariance `Cov(X_i, X_j) = block(i, j)`, through one square root of
/// the stacked `NL x NL` covariance.
#[derive(Clone, Debug)]
pub struct GaussianPathSampler {
    dim: usize,
    steps: usize,
    factor: DMatrix<f64>,
}

impl GaussianPathSampler {
    pub fn new(dim: usize, steps: usize, block: impl Fn(usize, usize) -> DMatrix<f64>) -> Result<Self> {
        let total = dim * steps;
        let mut big = DMatrix::zeros(total, total);
        for i in 0..steps {
            for j in i..steps {
                let b = block(i, j);
                big.view_mut((i * dim, j * dim), (dim, dim)).copy_from(&b);
                if i != j {
                    big.view_mut((j * dim, i * dim), (dim, dim)).copy_from(&b.transpose());
                }
            }
        }
        let factor = psd_sqrt(&SymPsd::new(big))?.into_inner();
        Ok(GaussianPathSampler { dim, steps, factor })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<DVector<f64>> {
        let total = self.dim * self.steps;
        let xi = DVector::from_fn(total, |_, _| StandardNormal.sample(rng));
        let x = &self.factor * xi;
        (0..self.steps).map(|i| x.rows(i * self.dim, self.dim).into_owned()).collect()
    }
}

/// Joint sample of `(P W_A(s_i))_i` for strictly increasing positive times.
pub fn sample_noise_path<M: ProjectedModel + ?Sized>(model: &M, times: &[f64], seed: u64) -> Result<Vec<DVector<f64>>> {
    let sampler = noise_path_sampler(model, times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(&mut rng))
}

/// Sampler behind [`sample_noise_path`], for drawing many paths.
pub fn noise_path_sampler<M: ProjectedModel + ?Sized>(model: &M, times: &[f64]) -> Result<GaussianPathSampler> {
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|&t| t <= 0.0) {
        return Err(Error::ConfigInvalid("noise path times must be positive and strictly increasing".into()));
    }
    GaussianPathSampler::new(model.proj_dim(), times.len(), |i, j| model.noise_cov(times[i], times[j]))
}
