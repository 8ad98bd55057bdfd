//! Mild solutions of the forward HJB equation
//!
//! `w(t) = R_t[phi] + int_0^t R_{t-s}[H_min(grad^C w(s))] ds + int_{T-t}^T l0`,
//!
//! with `v(t, x) = w(T - t, x)`, in the class of functions
//! `w(t, x) = f(t, P e^{tA} x)` whose C-gradient is `t^{-gamma} fbar(t, P e^{tA} x)`.
//! Both `f` and `fbar` live on a time grid times a tensor grid in the projected
//! coordinates; the Picard map is applied on those grids.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ou::{ProjectedModel, TerminalCost};
use crate::smoothing::convolution_kernel;
use crate::spectral::{build_quadrature, gauss_legendre_unit, QuadratureKind, QuadratureRule};

/// `H_min(p) = min_j <p, u_j> + l1(u_j)` over a finite control grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hamiltonian {
    controls: Vec<Vec<f64>>,
    running_cost: Vec<f64>,
}

impl Hamiltonian {
    pub fn new(controls: Vec<Vec<f64>>, running_cost: Vec<f64>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::ConfigInvalid("control grid must be nonempty".into()));
        }
        if controls.len() != running_cost.len() {
            return Err(Error::ConfigInvalid(format!(
                "{} control points but {} running cost values",
                controls.len(),
                running_cost.len()
            )));
        }
        let m = controls[0].len();
        if m == 0 || controls.iter().any(|u| u.len() != m) {
            return Err(Error::ConfigInvalid("control points must share a positive dimension".into()));
        }
        if controls.iter().flatten().chain(&running_cost).any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid("control grid and running cost must be finite".into()));
        }
        Ok(Hamiltonian { controls, running_cost })
    }

    /// `U = {0}`, `l1 = 0`.
    pub fn trivial(m: usize) -> Self {
        Hamiltonian { controls: vec![vec![0.0; m]], running_cost: vec![0.0] }
    }

    /// Uniform grid on `[-bound, bound]^m` with `per_axis` points per axis and
    /// running cost `weight |u|^2`.
    pub fn box_grid(m: usize, bound: f64, per_axis: usize, weight: f64) -> Result<Self> {
        let per_axis = per_axis.max(1);
        let axis: Vec<f64> = if per_axis == 1 {
            vec![0.0]
        } else {
            (0..per_axis).map(|i| -bound + 2.0 * bound * i as f64 / (per_axis - 1) as f64).collect()
        };
        let total = per_axis.pow(m as u32);
        let controls: Vec<Vec<f64>> = (0..total)
            .map(|mut idx| {
                let mut u = vec![0.0; m];
                for k in (0..m).rev() {
                    u[k] = axis[idx % per_axis];
                    idx /= per_axis;
                }
                u
            })
            .collect();
        let costs = controls.iter().map(|u| weight * u.iter().map(|x| x * x).sum::<f64>()).collect();
        Hamiltonian::new(controls, costs)
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn control(&self, j: usize) -> &[f64] {
        &self.controls[j]
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn running_cost(&self, j: usize) -> f64 {
        self.running_cost[j]
    }

    /// Value and smallest minimizing index.
    pub fn h_min(&self, p: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (j, (u, c)) in self.controls.iter().zip(&self.running_cost).enumerate() {
            let v = u.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + c;
            if v < best.0 {
                best = (v, j);
            }
        }
        best
    }

    /// Lipschitz constant of `H_min`: `max_j |u_j|`.
    pub fn lipschitz(&self) -> f64 {
        self.controls.iter().map(|u| u.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }

    pub fn min_running_cost(&self) -> f64 {
        self.running_cost.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_running_cost(&self) -> f64 {
        self.running_cost.iter().map(|c| c.abs()).fold(0.0, f64::max)
    }
}

/// State-free running cost `l0(t)`, piecewise linear between table nodes and
/// constant outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeCost {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl TimeCost {
    pub fn constant(c: f64) -> Self {
        TimeCost { times: vec![0.0], values: vec![c] }
    }

    pub fn table(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::ConfigInvalid("running cost table needs matching nonempty times and values".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || values.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid("running cost times must be finite and strictly increasing".into()));
        }
        Ok(TimeCost { times, values })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    /// `int_a^b l0`, exact for the piecewise linear interpolant.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut pts = vec![a];
        pts.extend(self.times.iter().copied().filter(|&t| t > a && t < b));
        pts.push(b);
        pts.windows(2).map(|w| 0.5 * (self.eval(w[0]) + self.eval(w[1])) * (w[1] - w[0])).sum()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Uniform tensor grid on a box in R^N; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    points: usize,
}

impl SpaceGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, points: usize) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::ConfigInvalid("space grid bounds must have equal positive length".into()));
        }
        if points < 2 || lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::ConfigInvalid("space grid needs at least 2 points per axis and hi > lo".into()));
        }
        Ok(SpaceGrid { lo, hi, points })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    fn step(&self, a: usize) -> f64 {
        (self.hi[a] - self.lo[a]) / (self.points - 1) as f64
    }

    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for a in (0..n).rev() {
            let i = idx % self.points;
            idx /= self.points;
            y[a] = if i == self.points - 1 { self.hi[a] } else { self.lo[a] + i as f64 * self.step(a) };
        }
        y
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a - 1e-12 && *v <= *b + 1e-12)
    }

    pub fn check_contains(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        for (a, v) in y.iter().enumerate() {
            if !(*v >= self.lo[a] - 1e-12 && *v <= self.hi[a] + 1e-12) {
                return Err(Error::OutOfGrid { axis: a, value: *v, lo: self.lo[a], hi: self.hi[a] });
            }
        }
        Ok(())
    }

    /// Multilinear interpolation of `values[offset + stride * p]` at `y`,
    /// clamping `y` to the box.
    pub fn interp(&self, values: &[f64], stride: usize, offset: usize, y: &[f64]) -> f64 {
        let n = self.dim();
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        assert!(n <= 8, "interpolation supports at most 8 dimensions");
        for a in 0..n {
            let pos = ((y[a] - self.lo[a]) / self.step(a)).clamp(0.0, (self.points - 1) as f64);
            let i = (pos.floor() as usize).min(self.points - 2);
            base[a] = i;
            frac[a] = pos - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..n {
                let bit = (corner >> (n - 1 - a)) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx = idx * self.points + base[a] + bit;
            }
            if w != 0.0 {
                acc += w * values[offset + stride * idx];
            }
        }
        acc
    }
}

/// A member of the solution class on the solver grids. `f` is stored
/// time-major; `fbar` holds `m` components per (time, point) and is NaN at
/// `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueIterate {
    pub time_grid: Vec<f64>,
    pub space: SpaceGrid,
    pub control_dim: usize,
    pub gamma: f64,
    pub f: Vec<f64>,
    pub fbar: Vec<f64>,
}

impl ValueIterate {
    pub fn zeros(time_grid: Vec<f64>, space: SpaceGrid, control_dim: usize, gamma: f64) -> Self {
        let (nt, ns) = (time_grid.len(), space.len());
        let mut fbar = vec![0.0; nt * ns * control_dim];
        fbar[..ns * control_dim].iter_mut().for_each(|v| *v = f64::NAN);
        ValueIterate { time_grid, space, control_dim, gamma, f: vec![0.0; nt * ns], fbar }
    }

    pub fn f_at(&self, i: usize, p: usize) -> f64 {
        self.f[i * self.space.len() + p]
    }

    pub fn fbar_at(&self, i: usize, p: usize) -> &[f64] {
        let m = self.control_dim;
        let start = (i * self.space.len() + p) * m;
        &self.fbar[start..start + m]
    }

    fn same_grid(&self, other: &ValueIterate) -> bool {
        self.time_grid == other.time_grid && self.space == other.space && self.control_dim == other.control_dim
    }

    /// `(lower node, weight of upper node)` for linear interpolation in time,
    /// clamped to `[t_1, T]` (gradient nodes only).
    fn gradient_time_bracket(&self, s: f64) -> (usize, f64) {
        let g = &self.time_grid;
        let nt = g.len();
        if s <= g[1] {
            return (1, 0.0);
        }
        if s >= g[nt - 1] {
            return (nt - 2, 1.0);
        }
        let i = g.partition_point(|&x| x <= s) - 1;
        (i, (s - g[i]) / (g[i + 1] - g[i]))
    }

    fn value_time_bracket(&self, s: f64) -> (usize, f64) {
        let g = &self.time_grid;
        let nt = g.len();
        if s <= 0.0 {
            return (0, 0.0);
        }
        if s >= g[nt - 1] {
            return (nt - 2, 1.0);
        }
        let i = g.partition_point(|&x| x <= s) - 1;
        (i, (s - g[i]) / (g[i + 1] - g[i]))
    }

    /// `f(s, y)` by interpolation; `y` must lie in the box.
    pub fn value(&self, s: f64, y: &[f64]) -> Result<f64> {
        self.space.check_contains(y)?;
        let ns = self.space.len();
        let (i, w) = self.value_time_bracket(s);
        let a = self.space.interp(&self.f[i * ns..(i + 1) * ns], 1, 0, y);
        if w == 0.0 {
            return Ok(a);
        }
        let b = self.space.interp(&self.f[(i + 1) * ns..(i + 2) * ns], 1, 0, y);
        Ok(a * (1.0 - w) + b * w)
    }

    /// `fbar(s, y)` by interpolation for `s >= t_1`.
    pub fn fbar_value(&self, s: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.space.check_contains(y)?;
        let (ns, m) = (self.space.len(), self.control_dim);
        let (i, w) = self.gradient_time_bracket(s);
        Ok((0..m)
            .map(|k| {
                let a = self.space.interp(&self.fbar[i * ns * m..(i + 1) * ns * m], m, k, y);
                let b = self.space.interp(&self.fbar[(i + 1) * ns * m..(i + 2) * ns * m], m, k, y);
                a * (1.0 - w) + b * w
            })
            .collect())
    }
}

/// `max e^{-eta t}|f1 - f2| + max e^{-eta t}|fbar1 - fbar2|` over the grids.
///
/// The weight decays in time, so for the causal Picard map a larger `eta`
/// shrinks the Lipschitz constant.
pub fn weighted_distance(g1: &ValueIterate, g2: &ValueIterate, eta: f64) -> Result<f64> {
    if !g1.same_grid(g2) {
        return Err(Error::GridMismatch);
    }
    let ns = g1.space.len();
    let m = g1.control_dim;
    let mut df: f64 = 0.0;
    let mut dg: f64 = 0.0;
    for (i, &t) in g1.time_grid.iter().enumerate() {
        let w = (-eta * t).exp();
        for p in 0..ns {
            df = df.max(w * (g1.f[i * ns + p] - g2.f[i * ns + p]).abs());
        }
        if i > 0 {
            for j in i * ns * m..(i + 1) * ns * m {
                dg = dg.max(w * (g1.fbar[j] - g2.fbar[j]).abs());
            }
        }
    }
    Ok(df + dg)
}

fn default_space_points() -> usize {
    41
}
fn default_width_factor() -> f64 {
    6.0
}
fn default_time_ratio() -> f64 {
    1.2
}
fn default_t_min_factor() -> f64 {
    1e-4
}
fn default_semigroup_order() -> usize {
    16
}
fn default_conv_order() -> usize {
    6
}
fn default_time_order() -> usize {
    8
}
fn default_mc_samples() -> usize {
    4096
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_iter() -> usize {
    30
}
fn default_horizon() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Blow-up exponent; `None` fits it from the model.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Norm weight; `None` selects it from measured contraction ratios.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Total number of time nodes including `t = 0`; overrides `time_ratio`.
    #[serde(default)]
    pub time_nodes: Option<usize>,
    #[serde(default = "default_time_ratio")]
    pub time_ratio: f64,
    #[serde(default = "default_t_min_factor")]
    pub t_min_factor: f64,
    #[serde(default = "default_space_points")]
    pub space_points: usize,
    /// Box half-width; default `width_factor * sqrt(max diag P Q_T P^*)`.
    #[serde(default)]
    pub half_width: Option<f64>,
    #[serde(default = "default_width_factor")]
    pub width_factor: f64,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub quadrature: Option<QuadratureKind>,
    #[serde(default = "default_semigroup_order")]
    pub semigroup_order: usize,
    #[serde(default = "default_conv_order")]
    pub conv_order: usize,
    /// Gauss-Legendre nodes per half of the time convolution.
    #[serde(default = "default_time_order")]
    pub time_order: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            horizon: default_horizon(),
            gamma: None,
            eta: None,
            time_nodes: None,
            time_ratio: default_time_ratio(),
            t_min_factor: default_t_min_factor(),
            space_points: default_space_points(),
            half_width: None,
            width_factor: default_width_factor(),
            center: None,
            quadrature: None,
            semigroup_order: default_semigroup_order(),
            conv_order: default_conv_order(),
            time_order: default_time_order(),
            mc_samples: default_mc_samples(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("gamma must lie in (0, 1), got {g}"));
            }
        }
        if let Some(e) = self.eta {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("eta must be nonnegative, got {e}"));
            }
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.time_nodes.is_some_and(|n| n < 3) {
            return bad("time_nodes must be at least 3".into());
        }
        if !(self.time_ratio > 1.0) || !(self.t_min_factor > 0.0 && self.t_min_factor < 1.0) {
            return bad("time_ratio must exceed 1 and t_min_factor lie in (0, 1)".into());
        }
        if self.space_points < 2 || self.semigroup_order == 0 || self.conv_order == 0 || self.time_order == 0 {
            return bad("grid sizes and quadrature orders must be positive".into());
        }
        if self.half_width.is_some_and(|h| !(h > 0.0)) || !(self.width_factor > 0.0) {
            return bad("box half-width must be positive".into());
        }
        Ok(())
    }

    /// `0` followed by a geometric grid from `t_min_factor * T` to `T`.
    pub fn time_grid(&self) -> Vec<f64> {
        let t_max = self.horizon;
        let t_min = self.t_min_factor * t_max;
        let count = match self.time_nodes {
            Some(n) => n - 1,
            None => ((t_max / t_min).ln() / self.time_ratio.ln()).ceil() as usize + 1,
        };
        let (a, b) = (t_min.ln(), t_max.ln());
        let mut grid = vec![0.0];
        grid.extend((0..count).map(|i| if i + 1 == count { t_max } else { (a + (b - a) * i as f64 / (count - 1) as f64).exp() }));
        grid
    }
}

/// Diagnostics for `gamma > 1/2`, where the intermediate estimate of the
/// contraction proof carries a negative power of t.
pub fn gamma_diagnostic(gamma: f64) -> Option<String> {
    (gamma > 0.5).then(|| format!("gamma = {gamma:.3} exceeds 1/2; the contraction is measured, not guaranteed by the a priori estimate"))
}

struct SNode {
    s: f64,
    /// Quadrature weight including the substitution Jacobian.
    jac: f64,
    /// `Sigma^{1/2} xi_q`, flattened Q x N.
    offsets: Vec<f64>,
    /// Inner quadrature weights.
    w: Vec<f64>,
    /// `w_q <Sigma^+ P e^{tA} C e_k, offset_q>`, flattened Q x m.
    gw: Vec<f64>,
}

/// The data of a Picard problem.
pub struct HjbProblem<'a, M: ProjectedModel, C: TerminalCost + ?Sized> {
    pub model: &'a M,
    pub ham: &'a Hamiltonian,
    pub phi: &'a C,
    pub ell0: &'a TimeCost,
}

/// The Picard map with its quadrature plan precomputed.
pub struct PicardMap<'a, M: ProjectedModel, C: TerminalCost + ?Sized> {
    problem: HjbProblem<'a, M, C>,
    cfg: SolverConfig,
    gamma: f64,
    time_grid: Vec<f64>,
    space: SpaceGrid,
    plan: Vec<Vec<SNode>>,
    base: ValueIterate,
}

impl<'a, M: ProjectedModel, C: TerminalCost + ?Sized> PicardMap<'a, M, C> {
    pub fn new(problem: HjbProblem<'a, M, C>, cfg: &SolverConfig, gamma: f64) -> Result<Self> {
        cfg.validate()?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::ConfigInvalid(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        let model = problem.model;
        let n = model.proj_dim();
        let m = model.control_dim();
        if problem.ham.control_dim() != m {
            return Err(Error::DimensionMismatch { expected: m, got: problem.ham.control_dim() });
        }
        let t_max = cfg.horizon;
        let time_grid = cfg.time_grid();
        let space = match &cfg.center {
            Some(c) if c.len() != n => return Err(Error::DimensionMismatch { expected: n, got: c.len() }),
            c => {
                let center = c.clone().unwrap_or_else(|| vec![0.0; n]);
                let half = match cfg.half_width {
                    Some(h) => h,
                    None => {
                        let cov = model.proj_cov(t_max);
                        cfg.width_factor * cov.matrix().diagonal().iter().fold(0.0_f64, |a, &v| a.max(v)).sqrt()
                    }
                };
                if !(half > 0.0) {
                    return Err(Error::ConfigInvalid("projected covariance vanishes; set half_width".into()));
                }
                SpaceGrid::new(center.iter().map(|c| c - half).collect(), center.iter().map(|c| c + half).collect(), cfg.space_points)?
            }
        };
        let kind = cfg.quadrature.unwrap_or(if n <= 3 { QuadratureKind::TensorHermite } else { QuadratureKind::MonteCarlo });
        let rule_for = |order: usize, seed: u64| -> Result<QuadratureRule> {
            match kind {
                QuadratureKind::TensorHermite => build_quadrature(n, kind, order, seed),
                QuadratureKind::MonteCarlo => build_quadrature(n, kind, cfg.mc_samples, seed),
            }
        };
        let sg_rule = rule_for(cfg.semigroup_order, cfg.seed)?;
        let conv_rule = rule_for(cfg.conv_order, crate::derive_seed(cfg.seed, 1))?;
        let (gl_x, gl_w) = gauss_legendre_unit(cfg.time_order);

        let plan = time_grid
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                if i == 0 {
                    return Ok(Vec::new());
                }
                let mut nodes = Vec::with_capacity(2 * gl_x.len());
                let p = 1.0 / (1.0 - gamma);
                for (side, (&x, &w)) in [0usize, 1].iter().flat_map(|s| gl_x.iter().zip(&gl_w).map(move |xw| (*s, xw))) {
                    let r = 0.5 * t * x.powf(p);
                    let jac = w * 0.5 * t * p * x.powf(p - 1.0);
                    let s = if side == 0 { r } else { t - r };
                    if !(s > 0.0 && s < t) {
                        continue;
                    }
                    let kernel = convolution_kernel(model, s, t)?;
                    let q = conv_rule.len();
                    let mut offsets = vec![0.0; q * n];
                    let mut ws = vec![0.0; q];
                    let mut gw = vec![0.0; q * m];
                    for (qi, (xi, wq)) in conv_rule.iter().enumerate() {
                        let off = &kernel.factor * DVector::from_column_slice(xi);
                        offsets[qi * n..(qi + 1) * n].copy_from_slice(off.as_slice());
                        ws[qi] = wq;
                        for k in 0..m {
                            gw[qi * m + k] = wq * kernel.weight.column(k).dot(&off);
                        }
                    }
                    nodes.push(SNode { s, jac, offsets, w: ws, gw });
                }
                Ok(nodes)
            })
            .collect::<Result<Vec<_>>>()?;

        let base = semigroup_iterate(&problem, &time_grid, &space, gamma, t_max, &sg_rule)?;
        Ok(PicardMap { problem, cfg: cfg.clone(), gamma, time_grid, space, plan, base })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn space(&self) -> &SpaceGrid {
        &self.space
    }

    /// The trivial-Hamiltonian solution `R_t[phi] + int l0`, the Picard
    /// starting point.
    pub fn semigroup_iterate(&self) -> &ValueIterate {
        &self.base
    }

    pub fn zero_iterate(&self) -> ValueIterate {
        ValueIterate::zeros(self.time_grid.clone(), self.space.clone(), self.problem.model.control_dim(), self.gamma)
    }

    /// One application of the Picard map.
    pub fn apply(&self, g: &ValueIterate) -> Result<ValueIterate> {
        if !g.same_grid(&self.base) {
            return Err(Error::GridMismatch);
        }
        let ns = self.space.len();
        let m = self.problem.model.control_dim();
        let n = self.space.dim();
        let gamma = self.gamma;
        let ham = self.problem.ham;

        // H_min(s^{-gamma} fbar(s, y_p)) on the space grid for every s node
        let h_tables: Vec<Vec<Vec<f64>>> = self
            .plan
            .par_iter()
            .map(|nodes| {
                nodes
                    .iter()
                    .map(|node| {
                        let (i, w) = g.gradient_time_bracket(node.s);
                        let scale = node.s.powf(-gamma);
                        let mut p_vec = vec![0.0; m];
                        (0..ns)
                            .map(|p| {
                                for k in 0..m {
                                    let a = g.fbar[(i * ns + p) * m + k];
                                    let b = g.fbar[((i + 1) * ns + p) * m + k];
                                    p_vec[k] = scale * (a * (1.0 - w) + b * w);
                                }
                                ham.h_min(&p_vec).0
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut out = self.base.clone();
        let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = (1..self.time_grid.len())
            .into_par_iter()
            .map(|i| {
                let t = self.time_grid[i];
                let tg = t.powf(gamma);
                let mut conv = vec![0.0; ns];
                let mut grad = vec![0.0; ns * m];
                let mut z = vec![0.0; n];
                for p in 0..ns {
                    let y = self.space.point(p);
                    let mut c = 0.0;
                    let mut gk = [0.0f64; 16];
                    for (node, h) in self.plan[i].iter().zip(&h_tables[i]) {
                        let mut inner = 0.0;
                        let mut inner_g = [0.0f64; 16];
                        for q in 0..node.w.len() {
                            for a in 0..n {
                                z[a] = y[a] + node.offsets[q * n + a];
                            }
                            let hv = self.space.interp(h, 1, 0, &z);
                            inner += node.w[q] * hv;
                            for k in 0..m {
                                inner_g[k] += node.gw[q * m + k] * hv;
                            }
                        }
                        c += node.jac * inner;
                        for k in 0..m {
                            gk[k] += node.jac * inner_g[k];
                        }
                    }
                    conv[p] = c;
                    for k in 0..m {
                        grad[p * m + k] = tg * gk[k];
                    }
                }
                (i, conv, grad)
            })
            .collect();
        for (i, conv, grad) in rows {
            for p in 0..ns {
                out.f[i * ns + p] += conv[p];
            }
            for (j, v) in grad.into_iter().enumerate() {
                out.fbar[i * ns * m + j] += v;
            }
        }
        Ok(out)
    }

    /// Largest measured ratio `d(Ug1, Ug2) / d(g1, g2)` over `pairs` random
    /// smooth pairs of bounded iterates.
    pub fn contraction_ratios(&self, eta: f64, pairs: usize, seed: u64) -> Result<Vec<f64>> {
        (0..pairs)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, j as u64));
                let g1 = self.random_iterate(&mut rng);
                let g2 = self.random_iterate(&mut rng);
                let num = weighted_distance(&self.apply(&g1)?, &self.apply(&g2)?, eta)?;
                let den = weighted_distance(&g1, &g2, eta)?;
                Ok(if den > 0.0 { num / den } else { 0.0 })
            })
            .collect()
    }

    /// Random smooth iterate with `|f|, |fbar| <= 1`.
    pub fn random_iterate<R: Rng>(&self, rng: &mut R) -> ValueIterate {
        let mut g = self.zero_iterate();
        let n = self.space.dim();
        let m = g.control_dim;
        let ns = self.space.len();
        let half: Vec<f64> = (0..n).map(|a| 0.5 * (self.space.hi[a] - self.space.lo[a])).collect();
        let mut wave = || {
            let freq: Vec<f64> = (0..n).map(|a| rng.random_range(-2.0..2.0) / half[a]).collect();
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let tfreq = rng.random_range(0.0..3.0);
            let amp = rng.random_range(0.3..1.0);
            (freq, phase, tfreq, amp)
        };
        let fw = wave();
        let gws: Vec<_> = (0..m).map(|_| wave()).collect();
        let eval = |w: &(Vec<f64>, f64, f64, f64), t: f64, y: &[f64]| {
            let arg: f64 = w.0.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + w.1 + w.2 * t;
            w.3 * arg.sin()
        };
        for (i, &t) in self.time_grid.iter().enumerate() {
            for p in 0..ns {
                let y = self.space.point(p);
                g.f[i * ns + p] = eval(&fw, t, &y);
                if i > 0 {
                    for (k, w) in gws.iter().enumerate() {
                        g.fbar[(i * ns + p) * m + k] = eval(w, t, &y);
                    }
                }
            }
        }
        g
    }

    /// Smallest `eta` in `{0, 1, 2, 4, .., 256}` whose measured contraction
    /// ratio stays below 0.9, with the ratios measured at that weight.
    pub fn select_eta(&self, pairs: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
        let mut last = None;
        for eta in std::iter::once(0.0).chain((0..9).map(|j| (1u32 << j) as f64)) {
            let ratios = self.contraction_ratios(eta, pairs, seed)?;
            if ratios.iter().all(|&r| r < 0.9) {
                return Ok((eta, ratios));
            }
            last = Some(ratios);
        }
        Err(Error::NoContraction { ratios: last.unwrap_or_default(), residual: f64::NAN })
    }
}

fn semigroup_iterate<M: ProjectedModel, C: TerminalCost + ?Sized>(
    problem: &HjbProblem<'_, M, C>,
    time_grid: &[f64],
    space: &SpaceGrid,
    gamma: f64,
    horizon: f64,
    rule: &QuadratureRule,
) -> Result<ValueIterate> {
    let model = problem.model;
    let n = space.dim();
    let m = model.control_dim();
    let ns = space.len();
    let mut g = ValueIterate::zeros(time_grid.to_vec(), space.clone(), m, gamma);
    for p in 0..ns {
        g.f[p] = problem.phi.eval(&space.point(p));
    }
    let rows = time_grid[1..]
        .par_iter()
        .map(|&t| {
            let kernel = convolution_kernel(model, 0.0, t)?;
            let running = problem.ell0.integral(horizon - t, horizon);
            let tg = t.powf(gamma);
            let offsets: Vec<DVector<f64>> = rule.iter().map(|(xi, _)| &kernel.factor * DVector::from_column_slice(xi)).collect();
            let gweights: Vec<Vec<f64>> = offsets.iter().map(|o| (0..m).map(|k| kernel.weight.column(k).dot(o)).collect()).collect();
            let mut fr = vec![0.0; ns];
            let mut gr = vec![0.0; ns * m];
            let mut z = vec![0.0; n];
            for p in 0..ns {
                let y = space.point(p);
                let mut acc = 0.0;
                let mut acc_g = vec![0.0; m];
                for (qi, (_, w)) in rule.iter().enumerate() {
                    for a in 0..n {
                        z[a] = y[a] + offsets[qi][a];
                    }
                    let v = problem.phi.eval(&z);
                    acc += w * v;
                    for k in 0..m {
                        acc_g[k] += w * v * gweights[qi][k];
                    }
                }
                fr[p] = acc + running;
                for k in 0..m {
                    gr[p * m + k] = tg * acc_g[k];
                }
            }
            Ok((fr, gr))
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, (fr, gr)) in rows.into_iter().enumerate() {
        let i = i + 1;
        g.f[i * ns..(i + 1) * ns].copy_from_slice(&fr);
        g.fbar[i * ns * m..(i + 1) * ns * m].copy_from_slice(&gr);
    }
    Ok(g)
}

/// Output of a Picard solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HjbSolution {
    pub iterate: ValueIterate,
    pub horizon: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Weighted distance between the last two iterates.
    pub residual: f64,
    /// Weighted distances between consecutive iterates.
    pub residuals: Vec<f64>,
    /// Ratios of consecutive residuals.
    pub contraction_estimates: Vec<f64>,
    /// Ratios measured on random pairs when selecting `eta`.
    pub eta_ratios: Vec<f64>,
    pub iterations: usize,
    /// `sup |f| / (sup |phi_bar| + sup |l0|)`.
    pub kappa1: f64,
    pub diagnostics: Vec<String>,
}

impl HjbSolution {
    /// `v(t, z)` for projected data `z = P e^{(T-t)A} x`.
    pub fn eval_value_projected(&self, t: f64, z: &[f64]) -> Result<f64> {
        check_time(t, self.horizon)?;
        self.iterate.value(self.horizon - t, z)
    }

    /// `v(t, x) = f(T - t, P e^{(T-t)A} x)`; at `t = T` this is `phi_bar(Px)`
    /// up to interpolation, evaluated exactly through `phi` by the caller.
    pub fn eval_value<M: ProjectedModel>(&self, model: &M, t: f64, x: &M::State) -> Result<f64> {
        check_time(t, self.horizon)?;
        let z = model.proj_semigroup_apply(self.horizon - t, x);
        self.eval_value_projected(t, z.as_slice())
    }

    /// C-gradient `(T-t)^{-gamma} fbar(T-t, z)` from projected data.
    pub fn eval_c_gradient_projected(&self, t: f64, z: &[f64]) -> Result<Vec<f64>> {
        check_time(t, self.horizon)?;
        let tau = self.horizon - t;
        let first = self.iterate.time_grid[1];
        if tau < first * (1.0 - 1e-12) {
            return Err(Error::TooCloseToHorizon { remaining: tau, first_node: first });
        }
        let scale = tau.powf(-self.gamma);
        Ok(self.iterate.fbar_value(tau, z)?.into_iter().map(|v| v * scale).collect())
    }

    pub fn eval_c_gradient<M: ProjectedModel>(&self, model: &M, t: f64, x: &M::State) -> Result<Vec<f64>> {
        check_time(t, self.horizon)?;
        let z = model.proj_semigroup_apply(self.horizon - t, x);
        self.eval_c_gradient_projected(t, z.as_slice())
    }

    /// Grid values as CSV: `t, y1..yN, f, fbar1..fbarm` (forward time).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let g = &self.iterate;
        let (n, m, ns) = (g.space.dim(), g.control_dim, g.space.len());
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|a| format!("y{a}")));
        header.push("f".into());
        header.extend((1..=m).map(|k| format!("fbar{k}")));
        writeln!(out, "{}", header.join(","))?;
        for (i, &t) in g.time_grid.iter().enumerate() {
            for p in 0..ns {
                let mut row = vec![fmt_float(t)];
                row.extend(g.space.point(p).into_iter().map(fmt_float));
                row.push(fmt_float(g.f_at(i, p)));
                row.extend(g.fbar_at(i, p).iter().map(|&v| fmt_float(v)));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Metadata without the grids.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "gamma": self.gamma,
            "eta": self.eta,
            "residual": self.residual,
            "iterations": self.iterations,
            "residuals": self.residuals,
            "contraction_ratios": self.contraction_estimates,
            "eta_ratios": self.eta_ratios,
            "kappa1": self.kappa1,
            "horizon": self.horizon,
            "time_nodes": self.iterate.time_grid.len(),
            "space_points_per_axis": self.iterate.space.points_per_axis(),
            "box_lo": self.iterate.space.lo(),
            "box_hi": self.iterate.space.hi(),
            "diagnostics": self.diagnostics,
        })
    }
}

/// Shortest round-trip representation with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

fn check_time(t: f64, horizon: f64) -> Result<()> {
    if !(t >= 0.0 && t <= horizon) {
        return Err(Error::ConfigInvalid(format!("time {t} outside [0, {horizon}]")));
    }
    Ok(())
}

/// Iterates the Picard map from `initial` until the weighted residual drops
/// below `tol`.
pub fn picard_solve_from<M: ProjectedModel, C: TerminalCost + ?Sized>(
    map: &PicardMap<'_, M, C>,
    initial: ValueIterate,
    eta: f64,
) -> Result<HjbSolution> {
    let cfg = map.config();
    let mut g = initial;
    let mut residuals = Vec::new();
    let mut ratios = Vec::new();
    let mut above = 0;
    for it in 1..=cfg.max_iter {
        let next = map.apply(&g)?;
        let d = weighted_distance(&next, &g, eta)?;
        if let Some(&prev) = residuals.last() {
            let r: f64 = if prev > 0.0 { d / prev } else { 0.0 };
            ratios.push(r);
            above = if r > 1.0 { above + 1 } else { 0 };
        }
        residuals.push(d);
        g = next;
        if d <= cfg.tol {
            return Ok(finish(map, g, eta, residuals, ratios, it));
        }
        if above >= 3 {
            return Err(Error::NoContraction { ratios, residual: d });
        }
    }
    Err(Error::NotConverged { iterations: cfg.max_iter, residual: residuals.last().copied().unwrap_or(f64::NAN), ratios })
}

fn finish<M: ProjectedModel, C: TerminalCost + ?Sized>(
    map: &PicardMap<'_, M, C>,
    iterate: ValueIterate,
    eta: f64,
    residuals: Vec<f64>,
    ratios: Vec<f64>,
    iterations: usize,
) -> HjbSolution {
    let sup_f = iterate.f.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let denom = map.problem.phi.bound() + map.problem.ell0.sup();
    let kappa1 = if denom > 0.0 { sup_f / denom } else { 0.0 };
    HjbSolution {
        iterate,
        horizon: map.config().horizon,
        gamma: map.gamma(),
        eta,
        residual: residuals.last().copied().unwrap_or(0.0),
        residuals,
        contraction_estimates: ratios,
        eta_ratios: Vec::new(),
        iterations,
        kappa1,
        diagnostics: gamma_diagnostic(map.gamma()).into_iter().collect(),
    }
}

/// Number of random pairs used to select the norm weight.
pub const ETA_PAIRS: usize = 10;

/// Fits or takes `gamma`, builds the Picard map, selects `eta` and iterates
/// from the trivial-Hamiltonian solution.
pub fn picard_solve<M: ProjectedModel, C: TerminalCost + ?Sized>(
    model: &M,
    ham: &Hamiltonian,
    phi: &C,
    ell0: &TimeCost,
    cfg: &SolverConfig,
) -> Result<HjbSolution> {
    cfg.validate()?;
    let gamma = match cfg.gamma {
        Some(g) => g,
        None => fitted_gamma(model, cfg.horizon)?,
    };
    let map = PicardMap::new(HjbProblem { model, ham, phi, ell0 }, cfg, gamma)?;
    let (eta, eta_ratios) = match cfg.eta {
        Some(e) => (e, Vec::new()),
        None => map.select_eta(ETA_PAIRS, crate::derive_seed(cfg.seed, 7))?,
    };
    let mut sol = picard_solve_from(&map, map.semigroup_iterate().clone(), eta)?;
    sol.eta_ratios = eta_ratios;
    Ok(sol)
}

/// Blow-up exponent from a log-log fit on `[1e-4 T, 1e-1 T]`.
pub fn fitted_gamma<M: ProjectedModel + ?Sized>(model: &M, horizon: f64) -> Result<f64> {
    let grid = crate::smoothing::log_grid(1e-4 * horizon, 1e-1 * horizon, 20, &model.control_breakpoints(), 0.1);
    let gamma = crate::smoothing::fit_blowup(model, &grid)?.gamma();
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::ConfigInvalid(format!("fitted blow-up exponent {gamma:.3} outside (0, 1)")));
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ou::testing::Brownian;
    use crate::ou::FnCost;

    #[test]
    fn h_min_examples() {
        let h = Hamiltonian::trivial(1);
        assert_eq!(h.h_min(&[3.7]), (0.0, 0));
        let h = Hamiltonian::new(vec![vec![-1.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(h.h_min(&[2.0]), (-2.0, 0));
        let h = Hamiltonian::new(vec![vec![-1.0], vec![0.0], vec![1.0]], vec![0.5, 0.2, 0.2]).unwrap();
        assert_eq!(h.h_min(&[0.0]), (0.2, 1));
        assert!(Hamiltonian::new(vec![], vec![]).is_err());
        assert!(Hamiltonian::new(vec![vec![1.0]], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn box_grid_layout() {
        let h = Hamiltonian::box_grid(2, 1.0, 3, 0.5).unwrap();
        assert_eq!(h.len(), 9);
        assert_eq!(h.control(0), &[-1.0, -1.0]);
        assert_eq!(h.control(4), &[0.0, 0.0]);
        assert!((h.lipschitz() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(h.running_cost(8), 1.0);
    }

    #[test]
    fn time_cost_integral() {
        let c = TimeCost::constant(2.0);
        assert!((c.integral(0.2, 0.7) - 1.0).abs() < 1e-15);
        let c = TimeCost::table(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!((c.integral(0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((c.integral(0.5, 2.0) - (0.375 + 1.0)).abs() < 1e-15);
        assert!(TimeCost::table(vec![1.0, 0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn space_interpolation_is_exact_for_multilinear() {
        let g = SpaceGrid::new(vec![-1.0, 0.0], vec![1.0, 2.0], 5).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|p| {
            let y = g.point(p);
            1.0 + 2.0 * y[0] - y[1] + 0.5 * y[0] * y[1]
        }).collect();
        for y in [[0.13, 1.7], [-0.9, 0.01], [1.0, 2.0]] {
            let exact = 1.0 + 2.0 * y[0] - y[1] + 0.5 * y[0] * y[1];
            assert!((g.interp(&vals, 1, 0, &y) - exact).abs() < 1e-13);
        }
        // clamping
        assert!((g.interp(&vals, 1, 0, &[5.0, 2.0]) - g.interp(&vals, 1, 0, &[1.0, 2.0])).abs() < 1e-15);
        assert!(matches!(g.check_contains(&[5.0, 1.0]), Err(Error::OutOfGrid { axis: 0, .. })));
    }

    #[test]
    fn time_grid_shape() {
        let cfg = SolverConfig::default();
        let g = cfg.time_grid();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 1e-4).abs() < 1e-18);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(g.windows(2).skip(1).all(|w| w[1] / w[0] <= 1.2 + 1e-12));
        let cfg = SolverConfig { time_nodes: Some(40), ..Default::default() };
        assert_eq!(cfg.time_grid().len(), 40);
    }

    #[test]
    fn config_rejects_bad_gamma() {
        assert!(SolverConfig { gamma: Some(1.5), ..Default::default() }.validate().is_err());
        assert!(SolverConfig { gamma: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(SolverConfig { tol: 0.0, ..Default::default() }.validate().is_err());
    }

    fn small_cfg() -> SolverConfig {
        SolverConfig { gamma: Some(0.5), time_nodes: Some(12), space_points: 21, semigroup_order: 12, conv_order: 6, time_order: 6, ..Default::default() }
    }

    #[test]
    fn trivial_hamiltonian_is_one_step() {
        let m = Brownian { sigma2: 1.0 };
        let ham = Hamiltonian::trivial(1);
        let phi = FnCost::new(|y: &[f64]| y[0].tanh(), 1.0);
        let ell0 = TimeCost::constant(0.3);
        let sol = picard_solve(&m, &ham, &phi, &ell0, &SolverConfig { eta: Some(0.0), ..small_cfg() }).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.residual, 0.0);
        // f(t, 0) = E tanh(sqrt(t) Z) + 0.3 t = 0.3 t by symmetry
        let g = &sol.iterate;
        let mid = g.space.len() / 2;
        for (i, &t) in g.time_grid.iter().enumerate() {
            assert!((g.f_at(i, mid) - 0.3 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_iterate_gives_min_running_cost() {
        let m = Brownian { sigma2: 1.0 };
        let ham = Hamiltonian::new(vec![vec![-1.0], vec![1.0]], vec![0.4, 0.25]).unwrap();
        let phi = FnCost::new(|_: &[f64]| 0.0, 0.0);
        let ell0 = TimeCost::constant(0.0);
        let map = PicardMap::new(HjbProblem { model: &m, ham: &ham, phi: &phi, ell0: &ell0 }, &small_cfg(), 0.5).unwrap();
        let out = map.apply(&map.zero_iterate()).unwrap();
        for (i, &t) in out.time_grid.iter().enumerate() {
            assert!((out.f_at(i, 3) - 0.25 * t).abs() < 1e-12 * (1.0 + t), "t={t}");
        }
    }

    #[test]
    fn weighted_distance_examples() {
        let m = Brownian { sigma2: 1.0 };
        let ham = Hamiltonian::trivial(1);
        let phi = FnCost::new(|y: &[f64]| y[0].sin(), 1.0);
        let ell0 = TimeCost::constant(0.0);
        let map = PicardMap::new(HjbProblem { model: &m, ham: &ham, phi: &phi, ell0: &ell0 }, &small_cfg(), 0.5).unwrap();
        let g = map.semigroup_iterate().clone();
        assert_eq!(weighted_distance(&g, &g, 0.0).unwrap(), 0.0);
        let mut h = g.clone();
        h.f.iter_mut().for_each(|v| *v += 0.7);
        assert!((weighted_distance(&g, &h, 0.0).unwrap() - 0.7).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = map.random_iterate(&mut rng);
        let d0 = weighted_distance(&g, &a, 0.0).unwrap();
        let d2 = weighted_distance(&g, &a, 2.0).unwrap();
        assert!(d2 <= d0 && d2 >= d0 * (-2.0f64).exp());
        let other = SolverConfig { time_nodes: Some(10), ..small_cfg() };
        let map2 = PicardMap::new(HjbProblem { model: &m, ham: &ham, phi: &phi, ell0: &ell0 }, &other, 0.5).unwrap();
        assert!(matches!(weighted_distance(&g, map2.semigroup_iterate(), 0.0), Err(Error::GridMismatch)));
    }

    #[test]
    fn brownian_gradient_matches_derivative_of_value() {
        // with a trivial Hamiltonian fbar(t, y) = t^gamma d/dy E phi(y + sqrt(t) Z)
        let m = Brownian { sigma2: 1.0 };
        let ham = Hamiltonian::trivial(1);
        let phi = FnCost::new(|y: &[f64]| (y[0] - 0.3).tanh(), 1.0);
        let ell0 = TimeCost::constant(0.0);
        let map = PicardMap::new(HjbProblem { model: &m, ham: &ham, phi: &phi, ell0: &ell0 }, &small_cfg(), 0.5).unwrap();
        let g = map.semigroup_iterate();
        let ns = g.space.len();
        let i = g.time_grid.len() - 1;
        let t = g.time_grid[i];
        for p in 3..ns - 3 {
            let h = g.space.point(1)[0] - g.space.point(0)[0];
            let fd = (g.f_at(i, p + 1) - g.f_at(i, p - 1)) / (2.0 * h);
            assert!((g.fbar_at(i, p)[0] / t.powf(0.5) - fd).abs() < 2e-2, "p={p}");
        }
    }

    #[test]
    fn picard_converges_on_brownian() {
        let m = Brownian { sigma2: 1.0 };
        let ham = Hamiltonian::new(vec![vec![-0.3], vec![0.0], vec![0.3]], vec![0.02, 0.0, 0.02]).unwrap();
        let phi = FnCost::new(|y: &[f64]| (2.0 * y[0]).tanh(), 1.0);
        let ell0 = TimeCost::constant(0.1);
        let sol = picard_solve(&m, &ham, &phi, &ell0, &small_cfg()).unwrap();
        assert!(sol.residual <= 1e-4);
        assert!(sol.kappa1 < 2.0);
        // t = T value equals phi at grid points
        let z = sol.iterate.space.point(5);
        assert_eq!(sol.eval_value_projected(1.0, &z).unwrap(), (2.0 * z[0]).tanh());
        assert!(matches!(sol.eval_c_gradient_projected(1.0, &z), Err(Error::TooCloseToHorizon { .. })));
        assert!(sol.eval_value_projected(0.0, &[100.0]).is_err());
    }
}
