//! Partial smoothing: the operators `Lambda(t) = (P Q_t P^*)^{-1/2} P e^{tA} C`,
//! the C-derivative of `R_t[phi]` for `phi = phi_bar(P .)`, and blow-up rate
//! estimates for `|Lambda(t)|` as `t -> 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ou::{ProjectedModel, TerminalCost};
use crate::spectral::{op_norm, PsdFactors, QuadratureKind, QuadratureRule, DEFAULT_RANK_TOL};

/// Relative residual above which the control image is declared to leave the
/// covariance image.
pub const INCLUSION_TOL: f64 = 1e-6;

/// `(P Q_{t-s} P^*)^{-1/2} P e^{tA} C`; `s = 0` is the one-time operator.
#[derive(Clone, Debug)]
pub struct SmoothingOperator {
    pub t: f64,
    pub s: f64,
    pub matrix: DMatrix<f64>,
    /// Rank of `P Q_{t-s} P^*`.
    pub rank: usize,
    /// Relative part of `P e^{tA} C` outside the covariance image.
    pub residual: f64,
}

impl SmoothingOperator {
    pub fn norm(&self) -> f64 {
        op_norm(&self.matrix)
    }
}

pub fn lambda_operator<M: ProjectedModel + ?Sized>(model: &M, t: f64, s: f64) -> Result<SmoothingOperator> {
    if !(t > s && s >= 0.0) {
        return Err(Error::ConfigInvalid(format!("lambda_operator needs 0 <= s < t, got s = {s}, t = {t}")));
    }
    let f = PsdFactors::new(&model.proj_cov(t - s), DEFAULT_RANK_TOL)?;
    let control = model.proj_control(t);
    let residual = f.image_residual(&control);
    if residual > INCLUSION_TOL {
        return Err(Error::InclusionViolated { t, residual });
    }
    Ok(SmoothingOperator { t, s, matrix: f.pinv_sqrt.matrix() * control, rank: f.rank, residual })
}

/// Gaussian data for the C-derivative of `y -> E h(Y + y)` along
/// `P e^{tA} C`, where `Y ~ N(0, Sigma)` and `Sigma = P e^{sA} Q_{t-s} e^{sA^*} P^*`
/// (`Sigma = P Q_t P^*` for `s = 0`).
///
/// Integrating by parts against the Gaussian law gives
/// `d/dk E h(Y + y) = E[h(Y + y) <weight k, Y>]` with
/// `weight = Sigma^+ P e^{tA} C`, valid when the control image lies in the
/// image of `Sigma`.
#[derive(Clone, Debug)]
pub struct ConvolutionKernel {
    pub s: f64,
    pub t: f64,
    /// `Sigma^{1/2}`.
    pub factor: DMatrix<f64>,
    /// `Sigma^+ P e^{tA} C`, N x m.
    pub weight: DMatrix<f64>,
    pub residual: f64,
}

pub fn convolution_kernel<M: ProjectedModel + ?Sized>(model: &M, s: f64, t: f64) -> Result<ConvolutionKernel> {
    if !(t > s && s >= 0.0) {
        return Err(Error::ConfigInvalid(format!("convolution_kernel needs 0 <= s < t, got s = {s}, t = {t}")));
    }
    let sigma = if s == 0.0 { model.proj_cov(t) } else { model.pushforward_cov(s, t) };
    let f = PsdFactors::new(&sigma, DEFAULT_RANK_TOL)?;
    let control = model.proj_control(t);
    let residual = f.image_residual(&control);
    if residual > INCLUSION_TOL {
        return Err(Error::InclusionViolated { t, residual });
    }
    Ok(ConvolutionKernel { s, t, factor: f.sqrt.into_inner(), weight: &f.pinv * control, residual })
}

/// An m-vector estimate with per-component standard errors (zero for
/// deterministic rules).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub value: DVector<f64>,
    pub std_error: DVector<f64>,
}

/// C-gradient of `R_t[phi]` at a state with `P e^{tA} x = y0`:
/// component k is `E[phi_bar(S^{1/2} xi + y0) <Lambda(t) e_k, xi>]` with
/// `S = P Q_t P^*` and `xi` standard normal.
pub fn c_gradient_semigroup<M, C>(model: &M, phi: &C, t: f64, y0: &[f64], rule: &QuadratureRule) -> Result<GradientEstimate>
where
    M: ProjectedModel + ?Sized,
    C: TerminalCost + ?Sized,
{
    let n = model.proj_dim();
    if rule.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rule.dim() });
    }
    if y0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y0.len() });
    }
    let lambda = lambda_operator(model, t, 0.0)?;
    let sqrt = PsdFactors::new(&model.proj_cov(t), DEFAULT_RANK_TOL)?.sqrt.into_inner();
    let m = model.control_dim();
    let mut z = vec![0.0; n];
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    for (xi, w) in rule.iter() {
        crate::spectral::affine_into(&mut z, y0, &sqrt, xi);
        let v = phi.eval(&z);
        for k in 0..m {
            let weight: f64 = (0..n).map(|i| lambda.matrix[(i, k)] * xi[i]).sum();
            let g = v * weight;
            sum[k] += w * g;
            sum_sq[k] += w * g * g;
        }
    }
    let std_error = match rule.kind() {
        QuadratureKind::TensorHermite => DVector::zeros(m),
        QuadratureKind::MonteCarlo => {
            let count = rule.len() as f64;
            DVector::from_fn(m, |k, _| ((sum_sq[k] - sum[k] * sum[k]).max(0.0) / (count - 1.0).max(1.0)).sqrt())
        }
    };
    Ok(GradientEstimate { value: DVector::from_vec(sum), std_error })
}

/// Outcome of checking `|grad^C R_t[phi]| <= |Lambda(t)| sup|phi_bar|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

pub fn c_gradient_norm_bound_check<M, C>(model: &M, phi: &C, t: f64, y0: &[f64], rule: &QuadratureRule) -> Result<NormBoundCheck>
where
    M: ProjectedModel + ?Sized,
    C: TerminalCost + ?Sized,
{
    let grad = c_gradient_semigroup(model, phi, t, y0, rule)?;
    let lhs = grad.value.norm();
    let rhs = lambda_operator(model, t, 0.0)?.norm() * phi.bound();
    let slack = 3.0 * grad.std_error.norm();
    Ok(NormBoundCheck { lhs, rhs, ok: lhs <= rhs * (1.0 + 1e-3) + slack })
}

/// Least-squares power law `|Lambda(t)| ~ exp(intercept) t^slope`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupFit {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    /// Number of points entering the regression.
    pub fitted_points: usize,
}

impl BlowupFit {
    /// Blow-up exponent `gamma = -slope`.
    pub fn gamma(&self) -> f64 {
        -self.slope
    }
}

/// Logarithmically spaced grid in `[t_min, t_max]`, dropping points within a
/// relative distance `exclusion` of any breakpoint.
pub fn log_grid(t_min: f64, t_max: f64, points: usize, breakpoints: &[f64], exclusion: f64) -> Vec<f64> {
    let points = points.max(2);
    let (a, b) = (t_min.ln(), t_max.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .filter(|t| breakpoints.iter().all(|&d| (t - d).abs() >= exclusion * d))
        .collect()
}

/// Norms of `Lambda(t)` on the grid and the log-log slope, fitted without the
/// largest 10% of the times.
pub fn fit_blowup<M: ProjectedModel + ?Sized>(model: &M, t_grid: &[f64]) -> Result<BlowupFit> {
    use rayon::prelude::*;
    let mut times = t_grid.to_vec();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let norms = times
        .par_iter()
        .map(|&t| lambda_operator(model, t, 0.0).map(|op| op.norm()))
        .collect::<Result<Vec<f64>>>()?;
    let keep = times.len() - times.len() / 10;
    let xs: Vec<f64> = times[..keep].iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = norms[..keep].iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let (slope, intercept, residual) = least_squares_line(&xs, &ys);
    Ok(BlowupFit { times, norms, slope, intercept, residual, fitted_points: keep })
}

fn least_squares_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (0.0, ys.first().copied().unwrap_or(0.0), 0.0);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rms = (xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    (slope, intercept, rms)
}
