//! Linear SDE with a measure-valued delay in the control,
//!
//! `dy(t) = [a0 y(t) + b0 u(t) + int_{-d}^0 b1(dr) u(t + r)] dt + sigma dW(t)`,
//!
//! lifted to the product space `R^n x L^2([-d, 0]; R^n)`. The projection keeps
//! the present state `x0`, so `N = n`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ou::ProjectedModel;
use crate::spectral::{column_space_projector, numerical_rank, relative_residual, SymPsd};

/// Relative singular value cutoff for the controllability rank.
pub const KALMAN_TOL: f64 = 1e-10;

/// Residual below which a column counts as inside a subspace.
pub const STRONG_INCLUSION_TOL: f64 = 1e-8;

/// Minimum number of grid points for tabulated functions on `[-d, 0]`.
pub const MIN_HISTORY_POINTS: usize = 64;

/// A point mass of `b1` at `location` in `[-d, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub location: f64,
    /// n x m, rows as nested arrays.
    pub weight: Vec<Vec<f64>>,
}

/// Absolutely continuous part of `b1`, tabulated on a uniform grid of
/// `[-d, 0]` (first entry at `-d`, last at `0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Density {
    pub values: Vec<Vec<Vec<f64>>>,
}

fn default_history_points() -> usize {
    MIN_HISTORY_POINTS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub a0: Vec<Vec<f64>>,
    pub b0: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub d: f64,
    #[serde(default)]
    pub b1_atoms: Vec<Atom>,
    #[serde(default)]
    pub b1_density: Option<Density>,
    /// Grid size used when the CLI builds history states.
    #[serde(default = "default_history_points")]
    pub history_points: usize,
}

impl DelayConfig {
    /// Scalar configuration `a0 = a`, `b0 = b`, `sigma = s` with an atom of
    /// weight `c` at `-d`.
    pub fn scalar(a: f64, b: f64, s: f64, d: f64, c: f64) -> Self {
        DelayConfig {
            n: 1,
            m: 1,
            k: 1,
            a0: vec![vec![a]],
            b0: vec![vec![b]],
            sigma: vec![vec![s]],
            d,
            b1_atoms: vec![Atom { location: -d, weight: vec![vec![c]] }],
            b1_density: None,
            history_points: MIN_HISTORY_POINTS,
        }
    }
}

fn to_matrix(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::ConfigInvalid(format!("{name} must be a {nrows} x {ncols} matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::ConfigInvalid(format!("{name} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `int_lower^0 kernel(r) * f(r) dr` for `f` tabulated on the uniform grid of
/// `[-d, 0]` and linearly interpolated, by the trapezoid rule on the grid
/// nodes inside the window plus the window endpoint.
fn window_trapezoid(table: &[DMatrix<f64>], d: f64, lower: f64, kernel: impl Fn(f64) -> DMatrix<f64>) -> DMatrix<f64> {
    let len = table.len();
    let h = d / (len - 1) as f64;
    let lower = lower.max(-d);
    let interp = |r: f64| -> DMatrix<f64> {
        let pos = ((r + d) / h).clamp(0.0, (len - 1) as f64);
        let i = (pos.floor() as usize).min(len - 2);
        let w = pos - i as f64;
        &table[i] * (1.0 - w) + &table[i + 1] * w
    };
    let first = (((lower + d) / h).ceil() as usize).min(len - 1);
    let mut points: Vec<(f64, DMatrix<f64>)> = Vec::with_capacity(len - first + 1);
    let node = |i: usize| if i == len - 1 { 0.0 } else { -d + i as f64 * h };
    if node(first) - lower > 1e-12 * d {
        points.push((lower, interp(lower)));
    }
    for i in first..len {
        points.push((node(i), table[i].clone()));
    }
    let (rows, cols) = (kernel(0.0).nrows(), table[0].ncols());
    let mut acc = DMatrix::zeros(rows, cols);
    let values: Vec<(f64, DMatrix<f64>)> = points.into_iter().map(|(r, f)| (r, kernel(r) * f)).collect();
    for w in values.windows(2) {
        acc += (&w[0].1 + &w[1].1) * (0.5 * (w[1].0 - w[0].0));
    }
    acc
}

/// Full state `(x0, x1)`: present value and past-control contribution on a
/// uniform grid of `[-d, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayState {
    pub x0: DVector<f64>,
    pub x1: Vec<DVector<f64>>,
}

impl DelayState {
    pub fn new(x0: DVector<f64>, x1: Vec<DVector<f64>>) -> Result<Self> {
        if x1.len() < MIN_HISTORY_POINTS {
            return Err(Error::ConfigInvalid(format!("history grid needs at least {MIN_HISTORY_POINTS} points, got {}", x1.len())));
        }
        if x1.iter().any(|v| v.len() != x0.len()) {
            return Err(Error::DimensionMismatch { expected: x0.len(), got: x1.iter().map(|v| v.len()).find(|&l| l != x0.len()).unwrap_or(0) });
        }
        Ok(DelayState { x0, x1 })
    }

    /// State with no past control.
    pub fn present(x0: DVector<f64>) -> Self {
        let n = x0.len();
        DelayState { x0, x1: vec![DVector::zeros(n); MIN_HISTORY_POINTS] }
    }
}

/// Projected delay model.
#[derive(Clone, Debug)]
pub struct DelayModel {
    cfg: DelayConfig,
    a0: DMatrix<f64>,
    b0: DMatrix<f64>,
    sigma: DMatrix<f64>,
    sst: DMatrix<f64>,
    atoms: Vec<(f64, DMatrix<f64>)>,
    density: Option<Vec<DMatrix<f64>>>,
}

struct Parsed {
    a0: DMatrix<f64>,
    b0: DMatrix<f64>,
    sigma: DMatrix<f64>,
    atoms: Vec<(f64, DMatrix<f64>)>,
    density: Option<Vec<DMatrix<f64>>>,
}

fn parse(cfg: &DelayConfig) -> Result<Parsed> {
    let (n, m, k) = (cfg.n, cfg.m, cfg.k);
    if n == 0 || m == 0 || k == 0 {
        return Err(Error::ConfigInvalid("n, m and k must be positive".into()));
    }
    if !(cfg.d > 0.0 && cfg.d.is_finite()) {
        return Err(Error::ConfigInvalid(format!("delay d = {} must be positive", cfg.d)));
    }
    if cfg.history_points < MIN_HISTORY_POINTS {
        return Err(Error::ConfigInvalid(format!("history_points must be at least {MIN_HISTORY_POINTS}")));
    }
    let a0 = to_matrix("a0", &cfg.a0, n, n)?;
    let b0 = to_matrix("b0", &cfg.b0, n, m)?;
    let sigma = to_matrix("sigma", &cfg.sigma, n, k)?;
    let atoms = cfg
        .b1_atoms
        .iter()
        .enumerate()
        .map(|(j, a)| {
            if !(a.location >= -cfg.d && a.location <= 0.0) {
                return Err(Error::ConfigInvalid(format!("atom {j} location {} outside [-d, 0]", a.location)));
            }
            Ok((a.location, to_matrix(&format!("atom {j} weight"), &a.weight, n, m)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let density = match &cfg.b1_density {
        None => None,
        Some(dens) => {
            if dens.values.len() < 2 {
                return Err(Error::ConfigInvalid("density table needs at least 2 points".into()));
            }
            Some(dens.values.iter().map(|v| to_matrix("density value", v, n, m)).collect::<Result<Vec<_>>>()?)
        }
    };
    Ok(Parsed { a0, b0, sigma, atoms, density })
}

/// Controllability matrix `[sigma, a0 sigma, .., a0^{n-1} sigma]`.
fn controllability_matrix(a0: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = sigma.shape();
    let mut out = DMatrix::zeros(n, n * k);
    let mut block = sigma.clone();
    for i in 0..n {
        out.view_mut((0, i * k), (n, k)).copy_from(&block);
        block = a0 * block;
    }
    out
}

/// Rank of the controllability matrix of `(a0, sigma)`.
pub fn kalman_rank(cfg: &DelayConfig) -> Result<usize> {
    let p = parse(cfg)?;
    Ok(numerical_rank(&controllability_matrix(&p.a0, &p.sigma), KALMAN_TOL))
}

/// `int_0^t e^{s a0} sigma sigma^T e^{s a0^T} ds` by classical RK4 on the
/// Lyapunov differential equation.
pub fn gramian(cfg: &DelayConfig, t: f64) -> Result<SymPsd> {
    let p = parse(cfg)?;
    Ok(gramian_rk4(&p.a0, &(&p.sigma * p.sigma.transpose()), t))
}

fn gramian_rk4(a0: &DMatrix<f64>, sst: &DMatrix<f64>, t: f64) -> SymPsd {
    let n = a0.nrows();
    let scale = a0.abs().max();
    let steps = 200usize.max((1000.0 * t * scale).ceil() as usize);
    let h = t / steps as f64;
    let rhs = |q: &DMatrix<f64>| a0 * q + q * a0.transpose() + sst;
    let mut q = DMatrix::zeros(n, n);
    for _ in 0..steps {
        let k1 = rhs(&q);
        let k2 = rhs(&(&q + &k1 * (0.5 * h)));
        let k3 = rhs(&(&q + &k2 * (0.5 * h)));
        let k4 = rhs(&(&q + &k3 * h));
        q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    SymPsd::new(q)
}

impl DelayModel {
    /// Builds the model. Fails with `RankDeficient` when `(a0, sigma)` is not
    /// controllable and some control direction leaves the controllable
    /// subspace.
    pub fn new(cfg: DelayConfig) -> Result<Self> {
        let model = Self::unchecked(cfg)?;
        let ctrb = controllability_matrix(&model.a0, &model.sigma);
        let rank = numerical_rank(&ctrb, KALMAN_TOL);
        let n = model.cfg.n;
        if rank < n {
            // The controllable subspace is a0-invariant, so it contains the
            // image of P e^{tA} C for every t iff it contains every
            // coefficient matrix.
            let proj = column_space_projector(&ctrb, KALMAN_TOL);
            let mut worst: f64 = 0.0;
            let mut check = |m: &DMatrix<f64>| worst = worst.max(relative_residual(&proj, m));
            check(&model.b0);
            model.atoms.iter().for_each(|(_, w)| check(w));
            if let Some(dens) = &model.density {
                dens.iter().for_each(&mut check);
            }
            if worst > STRONG_INCLUSION_TOL {
                return Err(Error::RankDeficient { rank, n });
            }
        }
        Ok(model)
    }

    /// Builds the model without the controllability check.
    pub fn unchecked(cfg: DelayConfig) -> Result<Self> {
        let p = parse(&cfg)?;
        let sst = &p.sigma * p.sigma.transpose();
        Ok(DelayModel { cfg, a0: p.a0, b0: p.b0, sigma: p.sigma, sst, atoms: p.atoms, density: p.density })
    }

    pub fn config(&self) -> &DelayConfig {
        &self.cfg
    }

    pub fn delay(&self) -> f64 {
        self.cfg.d
    }

    pub fn exp_a0(&self, t: f64) -> DMatrix<f64> {
        (&self.a0 * t).exp()
    }

    pub fn gramian(&self, t: f64) -> SymPsd {
        gramian_rk4(&self.a0, &self.sst, t)
    }

    pub fn kalman_rank(&self) -> usize {
        numerical_rank(&controllability_matrix(&self.a0, &self.sigma), KALMAN_TOL)
    }

    /// `e^{t a0} b0 + sum over active atoms + density part`.
    pub fn proj_control_delay(&self, t: f64) -> DMatrix<f64> {
        let mut out = self.exp_a0(t) * &self.b0;
        for (r, w) in &self.atoms {
            if t + r >= 0.0 {
                out += self.exp_a0(t + r) * w;
            }
        }
        if let Some(dens) = &self.density {
            out += window_trapezoid(dens, self.cfg.d, -t.min(self.cfg.d), |r| self.exp_a0(t + r));
        }
        out
    }

    /// Largest relative residual of the columns of `proj_control(t)` against
    /// `Im sigma` over the grid; the strong inclusion holds when it is below
    /// [`STRONG_INCLUSION_TOL`].
    pub fn strong_inclusion_residual(&self, t_grid: &[f64]) -> f64 {
        let proj = column_space_projector(&self.sigma, KALMAN_TOL);
        t_grid
            .iter()
            .map(|&t| {
                let c = self.proj_control_delay(t);
                c.column_iter()
                    .map(|col| relative_residual(&proj, &DMatrix::from_column_slice(col.len(), 1, col.as_slice())))
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn check_strong_inclusion(&self, t_grid: &[f64]) -> bool {
        self.strong_inclusion_residual(t_grid) < STRONG_INCLUSION_TOL
    }

    /// History state generated by a past control `u0` on `[-d, 0)`:
    /// `x1(xi) = int_{-d}^{xi} b1(dz) u0(z - xi)`.
    pub fn state_from_past_control(&self, x0: DVector<f64>, points: usize, u0: impl Fn(f64) -> DVector<f64>) -> Result<DelayState> {
        let d = self.cfg.d;
        let n = self.cfg.n;
        let h = d / (points.max(2) - 1) as f64;
        let x1 = (0..points)
            .map(|i| {
                let xi = -d + i as f64 * h;
                let mut v = DVector::zeros(n);
                for (r, w) in &self.atoms {
                    if *r <= xi {
                        v += w * u0(r - xi);
                    }
                }
                if let Some(dens) = &self.density {
                    // int_{-d}^{xi} density(z) u0(z - xi) dz on the density grid
                    let len = dens.len();
                    let hd = d / (len - 1) as f64;
                    let mut prev: Option<(f64, DVector<f64>)> = None;
                    for (j, dj) in dens.iter().enumerate() {
                        let z = -d + j as f64 * hd;
                        if z > xi + 1e-12 * d {
                            break;
                        }
                        let val = dj * u0(z - xi);
                        if let Some((zp, vp)) = prev {
                            v += (&vp + &val) * (0.5 * (z - zp));
                        }
                        prev = Some((z, val));
                    }
                }
                v
            })
            .collect();
        DelayState::new(x0, x1)
    }

    /// Terminal values `y(T)` of the delayed SDE by Euler-Maruyama on the
    /// full history, for a past control `past` on `[-d, 0)` and a control
    /// `control` on `[0, T]`.
    pub fn simulate_euler_maruyama(
        &self,
        x0: &DVector<f64>,
        past: &(dyn Fn(f64) -> DVector<f64> + Sync),
        control: &(dyn Fn(f64) -> DVector<f64> + Sync),
        horizon: f64,
        steps: usize,
        samples: usize,
        seed: u64,
    ) -> Vec<DVector<f64>> {
        use rayon::prelude::*;
        let n = self.cfg.n;
        let k = self.cfg.k;
        let h = horizon / steps as f64;
        let u = |t: f64| if t < 0.0 { past(t) } else { control(t) };
        // deterministic forcing per step: b0 u(t) + int b1(dr) u(t + r)
        let forcing: Vec<DVector<f64>> = (0..steps)
            .map(|i| {
                let t = i as f64 * h;
                let mut f = &self.b0 * u(t);
                for (r, w) in &self.atoms {
                    f += w * u(t + r);
                }
                if let Some(dens) = &self.density {
                    let len = dens.len();
                    let hd = self.cfg.d / (len - 1) as f64;
                    for (j, dj) in dens.iter().enumerate() {
                        let wt = if j == 0 || j == len - 1 { 0.5 * hd } else { hd };
                        f += dj * u(t - self.cfg.d + j as f64 * hd) * wt;
                    }
                }
                f
            })
            .collect();
        let sqrt_h = h.sqrt();
        const BATCH: usize = 1024;
        let batches = samples.div_ceil(BATCH);
        (0..batches)
            .into_par_iter()
            .flat_map_iter(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, b as u64));
                let count = BATCH.min(samples - b * BATCH);
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let mut y = x0.clone();
                    for f in &forcing {
                        let dw = DVector::from_fn(k, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); z * sqrt_h });
                        y = &y + (&self.a0 * &y + f) * h + &self.sigma * dw;
                    }
                    out.push(y);
                }
                debug_assert_eq!(out[0].len(), n);
                out
            })
            .collect()
    }
}

impl ProjectedModel for DelayModel {
    type State = DelayState;

    fn proj_dim(&self) -> usize {
        self.cfg.n
    }

    fn control_dim(&self) -> usize {
        self.cfg.m
    }

    fn proj_semigroup_apply(&self, t: f64, x: &DelayState) -> DVector<f64> {
        let mut out = self.exp_a0(t) * &x.x0;
        if t > 0.0 && x.x1.len() >= 2 {
            let table: Vec<DMatrix<f64>> = x.x1.iter().map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice())).collect();
            let part = window_trapezoid(&table, self.cfg.d, -t.min(self.cfg.d), |r| self.exp_a0(t + r));
            out += part.column(0);
        }
        out
    }

    fn proj_cov(&self, t: f64) -> SymPsd {
        self.gramian(t)
    }

    fn proj_control(&self, t: f64) -> DMatrix<f64> {
        self.proj_control_delay(t)
    }

    fn pushforward_cov(&self, s: f64, t: f64) -> SymPsd {
        let e = self.exp_a0(s);
        SymPsd::new(&e * self.gramian(t - s).matrix() * e.transpose())
    }

    fn cross_cov(&self, s: f64, t: f64) -> DMatrix<f64> {
        self.exp_a0(s) * self.gramian(t - s).matrix()
    }

    fn noise_cov(&self, s: f64, s2: f64) -> DMatrix<f64> {
        let lo = s.min(s2);
        self.exp_a0(s - lo) * self.gramian(lo).matrix() * self.exp_a0(s2 - lo).transpose()
    }

    fn control_breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.atoms.iter().map(|(r, _)| -r).filter(|&t| t > 0.0).collect();
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup();
        b
    }
}

impl DelayConfig {
    /// Config with the given matrices; no atoms, no density.
    pub fn from_matrices(a0: &DMatrix<f64>, b0: &DMatrix<f64>, sigma: &DMatrix<f64>, d: f64) -> Self {
        DelayConfig {
            n: a0.nrows(),
            m: b0.ncols(),
            k: sigma.ncols(),
            a0: from_matrix(a0),
            b0: from_matrix(b0),
            sigma: from_matrix(sigma),
            d,
            b1_atoms: Vec::new(),
            b1_density: None,
            history_points: MIN_HISTORY_POINTS,
        }
    }
}
