//! Quadrature rules: 1-D Gauss-Hermite (standard normal weight) and
//! Gauss-Legendre, tensor Gauss-Hermite and seeded Monte-Carlo rules in R^N,
//! and the Gaussian expectation engine built on them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::{psd_sqrt, SymPsd};
use crate::error::{Error, Result};

/// Largest dimension for which a tensor Gauss-Hermite rule is built.
pub const MAX_TENSOR_DIM: usize = 4;

/// Tensor rules are used up to this projection dimension when the choice is
/// automatic.
pub const AUTO_TENSOR_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureKind {
    TensorHermite,
    MonteCarlo,
}

/// Nodes and weights for expectations under the standard normal law on R^dim.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    kind: QuadratureKind,
    dim: usize,
    /// Row-major, `dim` entries per node.
    nodes: Vec<f64>,
    weights: Vec<f64>,
    seed: Option<u64>,
}

impl QuadratureRule {
    pub fn kind(&self) -> QuadratureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (0..self.len()).map(move |i| (self.node(i), self.weights[i]))
    }

    /// Sums `w_i g(node_i)`; for Monte-Carlo rules also the standard error.
    pub fn expect(&self, mut g: impl FnMut(&[f64]) -> f64) -> Expectation {
        match self.kind {
            QuadratureKind::TensorHermite => {
                let value = self.iter().map(|(x, w)| w * g(x)).sum();
                Expectation { value, std_error: 0.0 }
            }
            QuadratureKind::MonteCarlo => {
                let vals: Vec<f64> = self.iter().map(|(x, _)| g(x)).collect();
                mc_summary(&vals)
            }
        }
    }
}

/// A quadrature estimate; `std_error` is zero for deterministic rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub value: f64,
    pub std_error: f64,
}

pub(crate) fn mc_summary(vals: &[f64]) -> Expectation {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return Expectation { value: 0.0, std_error: 0.0 };
    }
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Expectation { value: mean, std_error: (var / n).sqrt() }
}

/// Builds a rule for the standard normal law on R^dim.
///
/// `order_or_samples` is the number of nodes per axis for tensor rules and the
/// number of draws for Monte-Carlo rules.
pub fn build_quadrature(dim: usize, kind: QuadratureKind, order_or_samples: usize, seed: u64) -> Result<QuadratureRule> {
    if dim == 0 {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    match kind {
        QuadratureKind::TensorHermite => {
            if dim > MAX_TENSOR_DIM {
                return Err(Error::DimensionTooLarge(dim));
            }
            let (x, w) = gauss_hermite(order_or_samples.max(1));
            let n = x.len();
            let count = n.pow(dim as u32);
            let mut nodes = Vec::with_capacity(count * dim);
            let mut weights = Vec::with_capacity(count);
            let mut idx = vec![0usize; dim];
            for _ in 0..count {
                let mut wt = 1.0;
                for &i in &idx {
                    nodes.push(x[i]);
                    wt *= w[i];
                }
                weights.push(wt);
                for slot in idx.iter_mut().rev() {
                    *slot += 1;
                    if *slot < n {
                        break;
                    }
                    *slot = 0;
                }
            }
            Ok(QuadratureRule { kind, dim, nodes, weights, seed: None })
        }
        QuadratureKind::MonteCarlo => {
            let samples = order_or_samples.max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes: Vec<f64> = (0..samples * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let weights = vec![1.0 / samples as f64; samples];
            Ok(QuadratureRule { kind, dim, nodes, weights, seed: Some(seed) })
        }
    }
}

/// Tensor Gauss-Hermite for `dim <= 3`, Monte-Carlo otherwise.
pub fn auto_quadrature(dim: usize, order: usize, samples: usize, seed: u64) -> Result<QuadratureRule> {
    if dim <= AUTO_TENSOR_DIM {
        build_quadrature(dim, QuadratureKind::TensorHermite, order, seed)
    } else {
        build_quadrature(dim, QuadratureKind::MonteCarlo, samples, seed)
    }
}

/// A Gaussian law on R^N.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: SymPsd,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: SymPsd) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch { expected: cov.dim(), got: mean.len() });
        }
        Ok(GaussianMeasure { mean, cov })
    }

    pub fn centered(cov: SymPsd) -> Self {
        GaussianMeasure { mean: DVector::zeros(cov.dim()), cov }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymPsd {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `E f(Z)` for `Z ~ mu`, evaluated as `sum_i w_i f(mean + L xi_i)` with
/// `L = cov^{1/2}`.
pub fn gauss_expectation(f: impl Fn(&[f64]) -> f64, mu: &GaussianMeasure, rule: &QuadratureRule) -> Result<Expectation> {
    if rule.dim() != mu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: rule.dim() });
    }
    let l = psd_sqrt(mu.cov())?;
    Ok(expectation_with_factor(&f, mu.mean().as_slice(), l.matrix(), rule))
}

/// Same as [`gauss_expectation`] with a precomputed factor `L` (`L L^T = cov`).
pub fn expectation_with_factor(
    f: impl Fn(&[f64]) -> f64,
    mean: &[f64],
    factor: &DMatrix<f64>,
    rule: &QuadratureRule,
) -> Expectation {
    let n = mean.len();
    let mut z = vec![0.0; n];
    rule.expect(|xi| {
        affine_into(&mut z, mean, factor, xi);
        f(&z)
    })
}

/// `out = mean + factor * xi`.
#[inline]
pub fn affine_into(out: &mut [f64], mean: &[f64], factor: &DMatrix<f64>, xi: &[f64]) {
    let n = out.len();
    for i in 0..n {
        let mut acc = mean[i];
        for (j, &x) in xi.iter().enumerate() {
            acc += factor[(i, j)] * x;
        }
        out[i] = acc;
    }
}

/// Orthonormal Hermite polynomials `He_k / sqrt(k!)` at `x`, k = 0..n-1, and
/// the value and derivative of the degree-n one.
fn hermite_orthonormal(x: f64, n: usize) -> (Vec<f64>, f64, f64) {
    let mut p = Vec::with_capacity(n);
    let mut pm1 = 0.0;
    let mut pk = 1.0;
    for k in 0..n {
        p.push(pk);
        let next = (x * pk - (k as f64).sqrt() * pm1) / ((k + 1) as f64).sqrt();
        pm1 = pk;
        pk = next;
    }
    // pk = psi_n, pm1 = psi_{n-1}; psi_n' = sqrt(n) psi_{n-1}
    (p, pk, (n as f64).sqrt() * pm1)
}

/// Gauss-Hermite rule for the standard normal weight; weights sum to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    // Golub-Welsch start, then Newton polish on psi_n.
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let mut x: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for xi in x.iter_mut() {
        for _ in 0..3 {
            let (_, p, dp) = hermite_orthonormal(*xi, n);
            if dp != 0.0 {
                *xi -= p / dp;
            }
        }
    }
    // symmetric rule
    for i in 0..n / 2 {
        let m = 0.5 * (x[n - 1 - i] - x[i]);
        x[i] = -m;
        x[n - 1 - i] = m;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let mut w: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let (p, _, _) = hermite_orthonormal(xi, n);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    for i in 0..n / 2 {
        let m = 0.5 * (w[i] + w[n - 1 - i]);
        w[i] = m;
        w[n - 1 - i] = m;
    }
    let s: f64 = w.iter().sum();
    for wi in w.iter_mut() {
        *wi /= s;
    }
    (x, w)
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        // Tricomi initial guess for the i-th root on [-1, 1]
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let (pn, pn1) = if n == 1 { (z, 1.0) } else { (p1, p0) };
            dp = n as f64 * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
        }
        x.push(0.5 * (1.0 - z));
        w.push(1.0 / ((1.0 - z * z) * dp * dp));
    }
    (x, w)
}
