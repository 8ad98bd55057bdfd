//! Stochastic heat equation on `(0, pi)` with Dirichlet boundary control at
//! both endpoints, in the sine eigenbasis of the Dirichlet Laplacian.
//!
//! The state is a coefficient sequence `x_k = <x, e_k>`, `k = 1..n_modes`.
//! The noise covariance is `Q = (-A_0)^{-2 beta}` and `P` projects onto the
//! span of N orthonormal coefficient vectors `v_i`; projected coordinates are
//! `<x, v_i>`. The control `a = (a_0, a_pi)` enters through `B_0 = (-A_0) D`
//! with `D` the harmonic (here: linear) extension of the boundary values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ou::ProjectedModel;
use crate::spectral::{SpectralBasis, SymPsd};

/// `lambda_k = k^2`, the eigenvalues of `-d^2/dxi^2` on `(0, pi)`.
pub fn eigenvalues(n_modes: usize) -> Result<SpectralBasis> {
    SpectralBasis::new((1..=n_modes).map(|k| (k * k) as f64).collect())
}

/// Coefficients of the harmonic extension of boundary values
/// `a = (a(0), a(pi))`: `(Da)_k = sqrt(2) (a_0 - (-1)^k a_1) / k`.
pub fn dirichlet_map_coeffs(a: [f64; 2], n_modes: usize) -> Vec<f64> {
    (1..=n_modes)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            std::f64::consts::SQRT_2 * (a[0] - sign * a[1]) / k as f64
        })
        .collect()
}

/// `(B_0 a)_k = lambda_k (Da)_k`; grows linearly in k, so `B_0 a` is not in
/// the state space.
pub fn control_coeffs(a: [f64; 2], n_modes: usize) -> Vec<f64> {
    dirichlet_map_coeffs(a, n_modes)
        .into_iter()
        .enumerate()
        .map(|(i, d)| ((i + 1) * (i + 1)) as f64 * d)
        .collect()
}

/// How the projection directions are specified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProjectionSpec {
    /// Indicator profiles of sub-intervals of `(0, pi)`, smoothed by
    /// `(-A_0)^{-alpha}` and orthonormalized.
    Bumps { intervals: Vec<[f64; 2]> },
    /// Single eigenmodes `e_k` (1-based).
    Modes { indices: Vec<usize> },
    /// Explicit coefficient vectors (orthonormalized on construction).
    Coefficients { vectors: Vec<Vec<f64>> },
    /// `P` = identity on all retained modes (diagnostic only).
    Identity,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        ProjectionSpec::Bumps {
            intervals: vec![[std::f64::consts::PI / 6.0, std::f64::consts::PI / 2.0], [std::f64::consts::PI / 2.0, 5.0 * std::f64::consts::PI / 6.0]],
        }
    }
}

fn default_n_modes() -> usize {
    256
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatConfig {
    #[serde(default = "default_n_modes")]
    pub n_modes: usize,
    /// Noise smoothing exponent, `Q = (-A_0)^{-2 beta}`.
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Declared smoothness of the projection directions.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub projection: ProjectionSpec,
    /// Smoothness exponent of the cost directions, recorded for reporting.
    #[serde(default)]
    pub cost_direction_exponent: Option<f64>,
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig {
            n_modes: default_n_modes(),
            beta: 0.0,
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            projection: ProjectionSpec::default(),
            cost_direction_exponent: None,
        }
    }
}

impl HeatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 {
            return Err(Error::ConfigInvalid("n_modes must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::ConfigInvalid("beta must be nonnegative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.25) {
            return Err(Error::ConfigInvalid(format!("epsilon = {} must lie in (0, 1/4)", self.epsilon)));
        }
        if !(self.alpha > self.beta + 0.25) {
            return Err(Error::ConfigInvalid(format!(
                "alpha = {} must exceed beta + 1/4 = {}",
                self.alpha,
                self.beta + 0.25
            )));
        }
        if matches!(self.projection, ProjectionSpec::Identity) {
            return Err(Error::ConfigInvalid("identity projection is a diagnostic; use HeatModel::unchecked".into()));
        }
        Ok(())
    }
}

/// Exponent of the dyadic envelope `max_{2^j <= k < 2^{j+1}} |v_k| ~ k^p`,
/// or `None` when fewer than three dyadic blocks carry mass.
pub fn decay_exponent(v: &[f64]) -> Option<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut lo = 4usize;
    while lo <= v.len() {
        let hi = (2 * lo).min(v.len() + 1);
        let peak = (lo..hi).map(|k| v[k - 1].abs()).fold(0.0, f64::max);
        if peak > 1e-300 {
            xs.push((lo as f64).ln());
            ys.push(peak.ln());
        }
        lo *= 2;
    }
    if xs.len() < 3 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Projected heat model.
#[derive(Clone, Debug)]
pub struct HeatModel {
    cfg: HeatConfig,
    lambda: Vec<f64>,
    /// N x n_modes, orthonormal rows.
    v: DMatrix<f64>,
    /// n_modes x 2, columns `D e_1`, `D e_2`.
    dirichlet: DMatrix<f64>,
}

impl HeatModel {
    /// Validates the configuration, including the decay of the projection
    /// directions against the declared `alpha`.
    pub fn new(cfg: HeatConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Self::unchecked(cfg)?;
        let required = -(2.0 * model.cfg.alpha + 1.0);
        for (i, row) in model.v.row_iter().enumerate() {
            let coeffs: Vec<f64> = row.iter().copied().collect();
            if let Some(p) = decay_exponent(&coeffs) {
                if p > required + 0.5 {
                    return Err(Error::ConfigInvalid(format!(
                        "projection direction {i} decays like k^{p:.2}, slower than lambda_k^(-alpha-1/2) = k^{required:.2}"
                    )));
                }
            }
        }
        Ok(model)
    }

    /// Builds the model without the smoothness checks; used for the
    /// unprojected diagnostic and for deliberately violating configurations.
    pub fn unchecked(cfg: HeatConfig) -> Result<Self> {
        if cfg.n_modes == 0 {
            return Err(Error::ConfigInvalid("n_modes must be positive".into()));
        }
        let n = cfg.n_modes;
        let lambda = eigenvalues(n)?.eigenvalues().to_vec();
        let raw: Vec<Vec<f64>> = match &cfg.projection {
            ProjectionSpec::Bumps { intervals } => intervals
                .iter()
                .map(|&[a, b]| {
                    (1..=n)
                        .map(|k| {
                            let kf = k as f64;
                            let c = (2.0 / std::f64::consts::PI).sqrt() * ((kf * a).cos() - (kf * b).cos()) / kf;
                            c * lambda[k - 1].powf(-cfg.alpha)
                        })
                        .collect()
                })
                .collect(),
            ProjectionSpec::Modes { indices } => indices
                .iter()
                .map(|&k| {
                    if k == 0 || k > n {
                        Err(Error::ConfigInvalid(format!("mode index {k} outside 1..={n}")))
                    } else {
                        let mut v = vec![0.0; n];
                        v[k - 1] = 1.0;
                        Ok(v)
                    }
                })
                .collect::<Result<_>>()?,
            ProjectionSpec::Coefficients { vectors } => vectors
                .iter()
                .map(|v| {
                    let mut out = vec![0.0; n];
                    for (o, x) in out.iter_mut().zip(v) {
                        *o = *x;
                    }
                    out
                })
                .collect(),
            ProjectionSpec::Identity => (0..n)
                .map(|i| {
                    let mut v = vec![0.0; n];
                    v[i] = 1.0;
                    v
                })
                .collect(),
        };
        if raw.is_empty() {
            return Err(Error::ConfigInvalid("at least one projection direction is required".into()));
        }
        let v = orthonormalize(raw)?;
        let mut dirichlet = DMatrix::zeros(n, 2);
        for (j, a) in [[1.0, 0.0], [0.0, 1.0]].into_iter().enumerate() {
            for (k, d) in dirichlet_map_coeffs(a, n).into_iter().enumerate() {
                dirichlet[(k, j)] = d;
            }
        }
        Ok(HeatModel { cfg, lambda, v, dirichlet })
    }

    pub fn config(&self) -> &HeatConfig {
        &self.cfg
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.lambda
    }

    /// Orthonormal projection directions as rows.
    pub fn projection_vectors(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// A state from its leading coefficients (remaining ones zero).
    pub fn state(&self, coeffs: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.cfg.n_modes);
        for (o, c) in x.iter_mut().zip(coeffs) {
            *o = *c;
        }
        x
    }

    /// A state whose projection `P e^{tA} x` equals `y`: `x = e^{-tA} P^* y`
    /// restricted to modes where `e^{t lambda_k}` stays finite.
    pub fn state_with_projection(&self, t: f64, y: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.v.nrows() {
            return Err(Error::DimensionMismatch { expected: self.v.nrows(), got: y.len() });
        }
        // Solve (V diag(e^{-t lambda}) V^T) c = y and take x = V^T c.
        let g = self.weighted_gram(|l| (-t * l).exp());
        let c = g
            .lu()
            .solve(&DVector::from_column_slice(y))
            .ok_or_else(|| Error::ConfigInvalid("projection Gram matrix is singular".into()))?;
        Ok(self.v.transpose() * c)
    }

    fn q(&self, t: f64, l: f64) -> f64 {
        // integral_0^t lambda^{-2 beta} e^{-2 r lambda} dr
        l.powf(-2.0 * self.cfg.beta) * (-(-2.0 * t * l).exp_m1()) / (2.0 * l)
    }

    /// `V diag(w(lambda_k)) V^T`.
    fn weighted_gram(&self, w: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let nd = self.v.nrows();
        let weights: Vec<f64> = self.lambda.iter().map(|&l| w(l)).collect();
        let mut out = DMatrix::zeros(nd, nd);
        for i in 0..nd {
            for j in i..nd {
                let mut acc = 0.0;
                for (k, wk) in weights.iter().enumerate() {
                    let a = self.v[(i, k)];
                    if a != 0.0 {
                        acc += a * wk * self.v[(j, k)];
                    }
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }
}

fn orthonormalize(raw: Vec<Vec<f64>>) -> Result<DMatrix<f64>> {
    let n = raw[0].len();
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        let mut v = DVector::from_vec(r);
        let norm0 = v.norm();
        for _ in 0..2 {
            for q in &rows {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let norm = v.norm();
        if !(norm > 1e-10 * norm0) || norm0 == 0.0 {
            return Err(Error::ConfigInvalid(format!("projection direction {i} is linearly dependent on the others")));
        }
        rows.push(v / norm);
    }
    let mut m = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from(&r.transpose());
    }
    Ok(m)
}

impl ProjectedModel for HeatModel {
    type State = DVector<f64>;

    fn proj_dim(&self) -> usize {
        self.v.nrows()
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn proj_semigroup_apply(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let damped = DVector::from_fn(self.cfg.n_modes, |k, _| (-t * self.lambda[k]).exp() * x.get(k).copied().unwrap_or(0.0));
        &self.v * damped
    }

    fn proj_cov(&self, t: f64) -> SymPsd {
        SymPsd::new(self.weighted_gram(|l| self.q(t, l)))
    }

    fn proj_control(&self, t: f64) -> DMatrix<f64> {
        let mut scaled = self.dirichlet.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            let l = self.lambda[k];
            row *= l * (-t * l).exp();
        }
        &self.v * scaled
    }

    fn pushforward_cov(&self, s: f64, t: f64) -> SymPsd {
        SymPsd::new(self.weighted_gram(|l| (-2.0 * s * l).exp() * self.q(t - s, l)))
    }

    fn cross_cov(&self, s: f64, t: f64) -> DMatrix<f64> {
        self.weighted_gram(|l| (-s * l).exp() * self.q(t - s, l))
    }

    fn noise_cov(&self, s: f64, s2: f64) -> DMatrix<f64> {
        let lo = s.min(s2);
        let gap = (s - s2).abs();
        self.weighted_gram(|l| (-gap * l).exp() * self.q(lo, l))
    }
}
