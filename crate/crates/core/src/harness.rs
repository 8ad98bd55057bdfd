//! Monte Carlo evaluation of finite-horizon costs
//!
//! `J = int_{t0}^T l0 + int_{t0}^T l1(u) + phi_bar(P X(T))`
//!
//! for open-loop and greedy feedback policies, and the comparison of those
//! costs with the value function.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::{Hamiltonian, HjbSolution, TimeCost};
use crate::ou::{GaussianPathSampler, ProjectedModel, TerminalCost};
use crate::spectral::{gauss_legendre_unit, psd_sqrt, SymPsd};

/// Cost data shared by the solver and the simulator.
pub struct CostSpec<'a, C: TerminalCost + ?Sized> {
    pub ham: &'a Hamiltonian,
    pub phi: &'a C,
    pub ell0: &'a TimeCost,
    pub horizon: f64,
}

/// Control policies; every emitted control is a point of the control grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    /// Control grid index per time step.
    OpenLoop { indices: Vec<usize> },
    Constant { index: usize },
    /// `argmin_u <grad^C v(t, X(t)), u> + l1(u)` from a solution, held
    /// constant over each step.
    Greedy,
}

impl Policy {
    pub fn random_open_loop<R: Rng>(controls: usize, steps: usize, rng: &mut R) -> Policy {
        Policy::OpenLoop { indices: (0..steps).map(|_| rng.random_range(0..controls)).collect() }
    }

    fn is_greedy(&self) -> bool {
        matches!(self, Policy::Greedy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub sample_costs: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    pub terminal_projected_states: Vec<Vec<f64>>,
}

impl SimulationResult {
    fn from_samples(samples: Vec<(f64, Vec<f64>)>) -> Self {
        let n = samples.len() as f64;
        let (sample_costs, terminal_projected_states): (Vec<f64>, Vec<Vec<f64>>) = samples.into_iter().unzip();
        let mean = sample_costs.iter().sum::<f64>() / n;
        let var = if n > 1.0 { sample_costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        SimulationResult { sample_costs, mean, std_error: (var / n).sqrt(), terminal_projected_states }
    }
}

/// `int_a^b P e^{(T-r)A} C dr` by Gauss-Legendre, split where `P e^{tA} C`
/// jumps.
pub fn control_integral<M: ProjectedModel + ?Sized>(model: &M, horizon: f64, a: f64, b: f64) -> DMatrix<f64> {
    let (x, w) = gauss_legendre_unit(16);
    let mut cuts = vec![a];
    for bp in model.control_breakpoints() {
        let r = horizon - bp;
        if r > a && r < b {
            cuts.push(r);
        }
    }
    cuts.push(b);
    let mut acc = DMatrix::zeros(model.proj_dim(), model.control_dim());
    for seg in cuts.windows(2) {
        let len = seg[1] - seg[0];
        for (xi, wi) in x.iter().zip(&w) {
            acc += model.proj_control(horizon - (seg[0] + len * xi)) * (wi * len);
        }
    }
    acc
}

const BATCH: usize = 256;

/// Simulates `n_samples` costs from `(t0, x0)` with `time_steps` control
/// steps. Greedy policies require `sol`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_cost<M, C>(
    model: &M,
    cost: &CostSpec<'_, C>,
    policy: &Policy,
    sol: Option<&HjbSolution>,
    t0: f64,
    x0: &M::State,
    n_samples: usize,
    time_steps: usize,
    seed: u64,
) -> Result<SimulationResult>
where
    M: ProjectedModel,
    C: TerminalCost + ?Sized,
{
    let horizon = cost.horizon;
    if !(t0 >= 0.0 && t0 < horizon) {
        return Err(Error::ConfigInvalid(format!("initial time {t0} must lie in [0, {horizon})")));
    }
    if n_samples == 0 || time_steps == 0 {
        return Err(Error::ConfigInvalid("n_samples and time_steps must be positive".into()));
    }
    let (n, m) = (model.proj_dim(), model.control_dim());
    if cost.ham.control_dim() != m {
        return Err(Error::DimensionMismatch { expected: m, got: cost.ham.control_dim() });
    }
    let dt = (horizon - t0) / time_steps as f64;
    let times: Vec<f64> = (0..=time_steps).map(|i| if i == time_steps { horizon } else { t0 + i as f64 * dt }).collect();
    let drift: Vec<DMatrix<f64>> = times.windows(2).map(|w| control_integral(model, horizon, w[0], w[1])).collect();
    let z0 = model.proj_semigroup_apply(horizon - t0, x0);
    let running = cost.ell0.integral(t0, horizon);
    let ctrl = |j: usize| DVector::from_column_slice(cost.ham.control(j));
    let batches = n_samples.div_ceil(BATCH);

    let samples: Vec<(f64, Vec<f64>)> = match policy {
        Policy::OpenLoop { .. } | Policy::Constant { .. } => {
            let indices = match policy {
                Policy::OpenLoop { indices } => indices.clone(),
                Policy::Constant { index } => vec![*index; time_steps],
                Policy::Greedy => unreachable!(),
            };
            if indices.len() != time_steps || indices.iter().any(|&j| j >= cost.ham.len()) {
                return Err(Error::ConfigInvalid(format!("open-loop policy needs {time_steps} indices below {}", cost.ham.len())));
            }
            let mut mean = z0.clone();
            for (d, &j) in drift.iter().zip(&indices) {
                mean += d * ctrl(j);
            }
            let control_cost: f64 = indices.iter().map(|&j| cost.ham.running_cost(j) * dt).sum();
            let factor = psd_sqrt(&model.proj_cov(horizon - t0))?.into_inner();
            (0..batches)
                .into_par_iter()
                .flat_map_iter(|b| {
                    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, b as u64));
                    let count = BATCH.min(n_samples - b * BATCH);
                    (0..count)
                        .map(|_| {
                            let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                            let z = &mean + &factor * xi;
                            let j = running + control_cost + cost.phi.eval(z.as_slice());
                            (j, z.as_slice().to_vec())
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        Policy::Greedy => {
            let sol = sol.ok_or_else(|| Error::ConfigInvalid("greedy policy requires a solution".into()))?;
            let t_min = sol.iterate.time_grid[1];
            let space = &sol.iterate.space;
            // Cov(M_a, M_b) = P e^{(T - r)A} Q_{r - t0} e^{(T - r)A^*} P^*, r = min(t_a, t_b)
            let block = |a: usize, b: usize| -> DMatrix<f64> {
                let r = times[a + 1].min(times[b + 1]);
                let s = horizon - r;
                if s <= 0.0 {
                    model.proj_cov(horizon - t0).into_inner()
                } else {
                    model.pushforward_cov(s, horizon - t0).into_inner()
                }
            };
            let sampler = GaussianPathSampler::new(n, time_steps, block)?;
            (0..batches)
                .into_par_iter()
                .map(|b| -> Result<Vec<(f64, Vec<f64>)>> {
                    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, b as u64));
                    let count = BATCH.min(n_samples - b * BATCH);
                    let mut out = Vec::with_capacity(count);
                    for _ in 0..count {
                        let noise = sampler.sample(&mut rng);
                        let mut det = z0.clone();
                        let mut control_cost = 0.0;
                        for i in 0..time_steps {
                            let z = if i == 0 { det.clone() } else { &det + &noise[i - 1] };
                            let zc: Vec<f64> = z.iter().enumerate().map(|(a, v)| v.clamp(space.lo()[a], space.hi()[a])).collect();
                            let t = times[i].min(horizon - t_min);
                            let grad = sol.eval_c_gradient_projected(t, &zc)?;
                            let j = cost.ham.h_min(&grad).1;
                            det += &drift[i] * ctrl(j);
                            control_cost += cost.ham.running_cost(j) * dt;
                        }
                        let z = det + &noise[time_steps - 1];
                        out.push((running + control_cost + cost.phi.eval(z.as_slice()), z.as_slice().to_vec()));
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect()
        }
    };
    Ok(SimulationResult::from_samples(samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub name: String,
    pub mean: f64,
    pub std_error: f64,
    /// `mean - value`.
    pub gap: f64,
    pub dominated: bool,
    #[serde(skip)]
    pub sample_costs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub value: f64,
    pub policies: Vec<PolicyReport>,
    /// Gap of the greedy policy, when one was simulated.
    pub greedy_gap: Option<f64>,
}

/// Simulates every policy and compares its cost with `v(t0, x0)`.
#[allow(clippy::too_many_arguments)]
pub fn dominance_report<M, C>(
    model: &M,
    cost: &CostSpec<'_, C>,
    sol: &HjbSolution,
    policies: &[(String, Policy)],
    t0: f64,
    x0: &M::State,
    n_samples: usize,
    time_steps: usize,
    seed: u64,
) -> Result<DominanceReport>
where
    M: ProjectedModel,
    C: TerminalCost + ?Sized,
{
    let value = sol.eval_value(model, t0, x0)?;
    let mut reports = Vec::with_capacity(policies.len());
    let mut greedy_gap = None;
    for (k, (name, policy)) in policies.iter().enumerate() {
        let res = simulate_cost(model, cost, policy, Some(sol), t0, x0, n_samples, time_steps, crate::derive_seed(seed, k as u64))?;
        let gap = res.mean - value;
        if policy.is_greedy() {
            greedy_gap = Some(gap);
        }
        reports.push(PolicyReport {
            name: name.clone(),
            mean: res.mean,
            std_error: res.std_error,
            gap,
            dominated: value <= res.mean + 3.0 * res.std_error,
            sample_costs: res.sample_costs,
        });
    }
    Ok(DominanceReport { value, policies: reports, greedy_gap })
}

impl DominanceReport {
    /// `DominanceViolated` for the first policy whose cost falls below the
    /// value beyond three standard errors.
    pub fn check(&self) -> Result<()> {
        match self.policies.iter().find(|r| !r.dominated) {
            Some(bad) => Err(Error::DominanceViolated { policy: bad.name.clone(), value: self.value, mean: bad.mean, std_error: bad.std_error }),
            None => Ok(()),
        }
    }
}

/// Checks `v(t0, x0) <= mean cost + 3 std_error` for every policy.
#[allow(clippy::too_many_arguments)]
pub fn value_dominance_check<M, C>(
    model: &M,
    cost: &CostSpec<'_, C>,
    sol: &HjbSolution,
    policies: &[(String, Policy)],
    t0: f64,
    x0: &M::State,
    n_samples: usize,
    time_steps: usize,
    seed: u64,
) -> Result<DominanceReport>
where
    M: ProjectedModel,
    C: TerminalCost + ?Sized,
{
    let report = dominance_report(model, cost, sol, policies, t0, x0, n_samples, time_steps, seed)?;
    report.check()?;
    Ok(report)
}

/// Exact covariance of the terminal projected state, for checks.
pub fn terminal_covariance<M: ProjectedModel + ?Sized>(model: &M, horizon: f64, t0: f64) -> SymPsd {
    model.proj_cov(horizon - t0)
}
