//! TOML run configuration shared by the command-line tool and the examples.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::delay::{DelayConfig, DelayModel, DelayState};
use crate::error::{Error, Result};
use crate::heat::{HeatConfig, HeatModel};
use crate::hjb::{Hamiltonian, SolverConfig, TimeCost};
use crate::ou::TerminalCost;

/// Terminal cost `phi_bar` as an expression over a few builtins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostExpr {
    Constant { value: f64 },
    /// `constant + <coeffs, y>`; unbounded, so only usable inside a clamp.
    Linear {
        coeffs: Vec<f64>,
        #[serde(default)]
        constant: f64,
    },
    /// `sum_j coeff_j prod_a y_a^{powers_j[a]}`; unbounded.
    Polynomial { terms: Vec<Monomial> },
    /// `bound * tanh(inner / bound)`.
    TanhClamp { bound: f64, inner: Box<CostExpr> },
    /// `height / (1 + exp(sharpness (|y - center| - radius)))`.
    SmoothIndicator {
        center: Vec<f64>,
        radius: f64,
        #[serde(default = "default_sharpness")]
        sharpness: f64,
        #[serde(default = "default_height")]
        height: f64,
    },
    Sum { terms: Vec<CostExpr> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

fn default_sharpness() -> f64 {
    4.0
}
fn default_height() -> f64 {
    1.0
}

impl CostExpr {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            CostExpr::Constant { value } => *value,
            CostExpr::Linear { coeffs, constant } => constant + coeffs.iter().zip(y).map(|(a, b)| a * b).sum::<f64>(),
            CostExpr::Polynomial { terms } => terms
                .iter()
                .map(|t| t.coeff * t.powers.iter().zip(y).map(|(&p, v)| v.powi(p as i32)).product::<f64>())
                .sum(),
            CostExpr::TanhClamp { bound, inner } => bound * (inner.eval(y) / bound).tanh(),
            CostExpr::SmoothIndicator { center, radius, sharpness, height } => {
                let r = center.iter().zip(y).map(|(c, v)| (v - c).powi(2)).sum::<f64>().sqrt();
                height / (1.0 + (sharpness * (r - radius)).exp())
            }
            CostExpr::Sum { terms } => terms.iter().map(|t| t.eval(y)).sum(),
        }
    }

    /// `sup |phi_bar|`, infinite for unclamped polynomials.
    pub fn sup_bound(&self) -> f64 {
        match self {
            CostExpr::Constant { value } => value.abs(),
            CostExpr::Linear { coeffs, .. } if coeffs.iter().all(|&c| c == 0.0) => self.eval(&[]).abs(),
            CostExpr::Linear { .. } | CostExpr::Polynomial { .. } => f64::INFINITY,
            CostExpr::TanhClamp { bound, .. } => bound.abs(),
            CostExpr::SmoothIndicator { height, .. } => height.abs(),
            CostExpr::Sum { terms } => terms.iter().map(|t| t.sup_bound()).sum(),
        }
    }

    /// Checks dimensions against `n` and that the cost is bounded.
    pub fn validate(&self, n: usize) -> Result<()> {
        self.check_dims(n)?;
        if !self.sup_bound().is_finite() {
            return Err(Error::ConfigInvalid("terminal cost must be bounded; wrap polynomials in tanh-clamp".into()));
        }
        Ok(())
    }

    fn check_dims(&self, n: usize) -> Result<()> {
        let dims = |got: usize| if got == n { Ok(()) } else { Err(Error::DimensionMismatch { expected: n, got }) };
        match self {
            CostExpr::Constant { .. } => Ok(()),
            CostExpr::Linear { coeffs, .. } => dims(coeffs.len()),
            CostExpr::Polynomial { terms } => terms.iter().try_for_each(|t| dims(t.powers.len())),
            CostExpr::TanhClamp { bound, inner } => {
                if !(*bound > 0.0) {
                    return Err(Error::ConfigInvalid("tanh-clamp bound must be positive".into()));
                }
                inner.check_dims(n)
            }
            CostExpr::SmoothIndicator { center, radius, sharpness, .. } => {
                if !(*radius >= 0.0 && *sharpness > 0.0) {
                    return Err(Error::ConfigInvalid("smooth-indicator needs radius >= 0 and sharpness > 0".into()));
                }
                dims(center.len())
            }
            CostExpr::Sum { terms } => terms.iter().try_for_each(|t| t.check_dims(n)),
        }
    }
}

impl TerminalCost for CostExpr {
    fn eval(&self, y: &[f64]) -> f64 {
        CostExpr::eval(self, y)
    }

    fn bound(&self) -> f64 {
        self.sup_bound()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSection {
    Heat(HeatConfig),
    Delay(DelayConfig),
}

/// Running cost in time: a constant or a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ell0Spec {
    Constant(f64),
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl Default for Ell0Spec {
    fn default() -> Self {
        Ell0Spec::Constant(0.0)
    }
}

/// Control grid: explicit points or a box grid with quadratic cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControlSpec {
    Points {
        points: Vec<Vec<f64>>,
        running_cost: Vec<f64>,
    },
    Box {
        bound: f64,
        #[serde(default = "default_per_axis")]
        per_axis: usize,
        #[serde(default)]
        weight: f64,
    },
}

fn default_per_axis() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default)]
    pub ell0: Ell0Spec,
    pub controls: ControlSpec,
    pub phi: CostExpr,
}

fn default_samples() -> usize {
    10_000
}
fn default_steps() -> usize {
    20
}
fn default_open_loop() -> usize {
    10
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default)]
    pub t0: f64,
    /// Heat: leading mode coefficients. Delay: present state.
    #[serde(default)]
    pub x0: Vec<f64>,
    /// Delay only: constant control applied on `[-d, 0)`.
    #[serde(default)]
    pub past_control: Option<Vec<f64>>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_steps")]
    pub time_steps: usize,
    #[serde(default = "default_open_loop")]
    pub open_loop_policies: usize,
    #[serde(default = "default_true")]
    pub greedy: bool,
    /// Added to the value before the dominance comparison; fault injection
    /// for exercising the failure path.
    #[serde(default)]
    pub value_offset: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            t0: 0.0,
            x0: Vec::new(),
            past_control: None,
            n_samples: default_samples(),
            time_steps: default_steps(),
            open_loop_policies: default_open_loop(),
            greedy: true,
            value_offset: 0.0,
        }
    }
}

fn default_lambda_points() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSection {
    /// Defaults to `1e-4 T`.
    #[serde(default)]
    pub t_min: Option<f64>,
    /// Defaults to `1e-1 T`.
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default = "default_lambda_points")]
    pub points: usize,
    /// Relative neighbourhood of control jump times left out of the grid.
    #[serde(default = "default_exclusion")]
    pub exclusion: f64,
}

fn default_exclusion() -> f64 {
    0.1
}

impl Default for LambdaSection {
    fn default() -> Self {
        LambdaSection { t_min: None, t_max: None, points: default_lambda_points(), exclusion: default_exclusion() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    /// Feed an indefinite covariance into the PSD invariant.
    PsdViolation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(default)]
    pub inject: Option<Injection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub cost: CostSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub lambda: LambdaSection,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// A built model of either kind.
pub enum AnyModel {
    Heat(HeatModel),
    Delay(DelayModel),
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn build_model(&self) -> Result<AnyModel> {
        Ok(match &self.model {
            ModelSection::Heat(c) => AnyModel::Heat(HeatModel::new(c.clone())?),
            ModelSection::Delay(c) => AnyModel::Delay(DelayModel::new(c.clone())?),
        })
    }

    pub fn proj_dim(&self) -> usize {
        match &self.model {
            ModelSection::Heat(c) => match &c.projection {
                crate::heat::ProjectionSpec::Bumps { intervals } => intervals.len(),
                crate::heat::ProjectionSpec::Modes { indices } => indices.len(),
                crate::heat::ProjectionSpec::Coefficients { vectors } => vectors.len(),
                crate::heat::ProjectionSpec::Identity => c.n_modes,
            },
            ModelSection::Delay(c) => c.n,
        }
    }

    pub fn control_dim(&self) -> usize {
        match &self.model {
            ModelSection::Heat(_) => 2,
            ModelSection::Delay(c) => c.m,
        }
    }

    pub fn hamiltonian(&self) -> Result<Hamiltonian> {
        let m = self.control_dim();
        let ham = match &self.cost.controls {
            ControlSpec::Points { points, running_cost } => Hamiltonian::new(points.clone(), running_cost.clone())?,
            ControlSpec::Box { bound, per_axis, weight } => {
                if !(*bound >= 0.0) {
                    return Err(Error::ConfigInvalid("control bound must be nonnegative".into()));
                }
                Hamiltonian::box_grid(m, *bound, *per_axis, *weight)?
            }
        };
        if ham.control_dim() != m {
            return Err(Error::DimensionMismatch { expected: m, got: ham.control_dim() });
        }
        Ok(ham)
    }

    pub fn ell0(&self) -> Result<TimeCost> {
        match &self.cost.ell0 {
            Ell0Spec::Constant(c) if c.is_finite() => Ok(TimeCost::constant(*c)),
            Ell0Spec::Constant(_) => Err(Error::ConfigInvalid("ell0 must be finite".into())),
            Ell0Spec::Table { times, values } => TimeCost::table(times.clone(), values.clone()),
        }
    }

    pub fn phi(&self) -> Result<CostExpr> {
        self.cost.phi.validate(self.proj_dim())?;
        Ok(self.cost.phi.clone())
    }

    /// Validates everything that does not require building the model.
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.hamiltonian()?;
        self.ell0()?;
        self.phi()?;
        let s = &self.simulate;
        if !(s.t0 >= 0.0 && s.t0 < self.solver.horizon) {
            return Err(Error::ConfigInvalid(format!("simulate.t0 must lie in [0, {})", self.solver.horizon)));
        }
        Ok(())
    }

    pub fn heat_state(&self, model: &HeatModel) -> Result<DVector<f64>> {
        let n = model.config().n_modes;
        if self.simulate.x0.len() > n {
            return Err(Error::DimensionMismatch { expected: n, got: self.simulate.x0.len() });
        }
        Ok(model.state(&self.simulate.x0))
    }

    pub fn delay_state(&self, model: &DelayModel) -> Result<DelayState> {
        let cfg = model.config();
        let x0 = if self.simulate.x0.is_empty() { vec![0.0; cfg.n] } else { self.simulate.x0.clone() };
        if x0.len() != cfg.n {
            return Err(Error::DimensionMismatch { expected: cfg.n, got: x0.len() });
        }
        let x0 = DVector::from_vec(x0);
        match &self.simulate.past_control {
            None => model.state_from_past_control(x0, cfg.history_points, |_| DVector::zeros(cfg.m)),
            Some(u) if u.len() == cfg.m => {
                let u = DVector::from_column_slice(u);
                model.state_from_past_control(x0, cfg.history_points, |_| u.clone())
            }
            Some(u) => Err(Error::DimensionMismatch { expected: cfg.m, got: u.len() }),
        }
    }
}
