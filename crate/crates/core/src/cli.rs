//! Subcommands behind the `mildhjb` binary. Each returns a process exit code:
//! 0 ok, 1 configuration, 2 no contraction, 3 inclusion, 4 dominance,
//! 5 invariant.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{AnyModel, CostExpr, Injection, RunConfig};
use crate::error::{Error, Result};
use crate::harness::{dominance_report, CostSpec, Policy};
use crate::hjb::{fmt_float, picard_solve, Hamiltonian, TimeCost};
use crate::ou::{cameron_martin_density, semigroup_apply, FnCost, ProjectedModel};
use crate::smoothing::{c_gradient_norm_bound_check, fit_blowup, log_grid};
use crate::spectral::{build_quadrature, QuadratureKind, SymPsd};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NO_CONTRACTION: i32 = 2;
pub const EXIT_INCLUSION: i32 = 3;
pub const EXIT_DOMINANCE: i32 = 4;
pub const EXIT_INVARIANT: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ConfigInvalid(_)
        | Error::ConfigParse(_)
        | Error::DimensionMismatch { .. }
        | Error::DimensionTooLarge(_)
        | Error::OutOfGrid { .. }
        | Error::TooCloseToHorizon { .. }
        | Error::Io(_) => EXIT_CONFIG,
        Error::NoContraction { .. } | Error::NotConverged { .. } => EXIT_NO_CONTRACTION,
        Error::InclusionViolated { .. } | Error::RankDeficient { .. } | Error::NotInCameronMartin { .. } => EXIT_INCLUSION,
        Error::DominanceViolated { .. } => EXIT_DOMINANCE,
        Error::NotPsd { .. } | Error::GridMismatch => EXIT_INVARIANT,
    }
}

/// Flags shared by all subcommands.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

impl RunOptions {
    fn out_dir(&self, cfg: &RunConfig) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("mildhjb-out"));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn load(path: &Path, opts: &RunOptions) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = opts.seed {
        cfg.solver.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs a subcommand body and turns errors into exit codes, reporting them on
/// stderr.
fn finish(result: Result<i32>) -> i32 {
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

macro_rules! with_model {
    ($model:expr, $m:ident => $body:expr) => {
        match $model {
            AnyModel::Heat($m) => $body,
            AnyModel::Delay($m) => $body,
        }
    };
}

/// Solves the HJB equation; writes `solution.csv` and `solution.json`.
pub fn cmd_solve(config: &Path, opts: &RunOptions) -> i32 {
    finish(solve_inner(config, opts))
}

fn solve_inner(config: &Path, opts: &RunOptions) -> Result<i32> {
    let cfg = load(config, opts)?;
    cfg.validate()?;
    let out = opts.out_dir(&cfg)?;
    let model = cfg.build_model()?;
    let (ham, phi, ell0) = (cfg.hamiltonian()?, cfg.phi()?, cfg.ell0()?);
    let result = with_model!(&model, m => picard_solve(m, &ham, &phi, &ell0, &cfg.solver));
    match result {
        Ok(sol) => {
            sol.write_csv(&out.join("solution.csv"))?;
            let mut meta = sol.metadata();
            meta["status"] = json!("converged");
            write_json(&out.join("solution.json"), &meta)?;
            opts.say(format!(
                "converged: {} iterations, residual {:.3e}, gamma {:.4}, eta {}, kappa1 {:.4}",
                sol.iterations, sol.residual, sol.gamma, sol.eta, sol.kappa1
            ));
            for d in &sol.diagnostics {
                opts.say(format!("note: {d}"));
            }
            Ok(EXIT_OK)
        }
        Err(e @ (Error::NoContraction { .. } | Error::NotConverged { .. })) => {
            let (residual, ratios) = match &e {
                Error::NoContraction { ratios, residual } | Error::NotConverged { ratios, residual, .. } => (*residual, ratios.clone()),
                _ => unreachable!(),
            };
            write_json(&out.join("solution.json"), &json!({ "status": "not-converged", "residual": residual, "ratios": ratios, "error": e.to_string() }))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Tabulates `|Lambda(t)|` and fits the blow-up exponent; writes
/// `lambda.csv` and `lambda.json`.
pub fn cmd_lambda(config: &Path, opts: &RunOptions) -> i32 {
    finish(lambda_inner(config, opts))
}

fn lambda_inner(config: &Path, opts: &RunOptions) -> Result<i32> {
    let cfg = load(config, opts)?;
    cfg.solver.validate()?;
    let out = opts.out_dir(&cfg)?;
    let model = cfg.build_model()?;
    let horizon = cfg.solver.horizon;
    let l = &cfg.lambda;
    let (t_min, t_max) = (l.t_min.unwrap_or(1e-4 * horizon), l.t_max.unwrap_or(1e-1 * horizon));
    if !(t_min > 0.0 && t_max > t_min) {
        return Err(Error::ConfigInvalid("lambda grid needs 0 < t_min < t_max".into()));
    }
    let (fit, extra) = with_model!(&model, m => {
        let grid = log_grid(t_min, t_max, l.points, &m.control_breakpoints(), l.exclusion);
        (fit_blowup(m, &grid)?, lambda_extra(&model, &grid))
    });
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("lambda.csv"))?);
    writeln!(csv, "t,norm")?;
    for (t, v) in fit.times.iter().zip(&fit.norms) {
        writeln!(csv, "{},{}", fmt_float(*t), fmt_float(*v))?;
    }
    csv.flush()?;
    let mut meta = json!({
        "slope": fit.slope,
        "intercept": fit.intercept,
        "residual": fit.residual,
        "gamma": fit.gamma(),
        "fitted_points": fit.fitted_points,
        "t_min": t_min,
        "t_max": t_max,
    });
    if let Some((k, v)) = extra {
        meta[k] = v;
    }
    write_json(&out.join("lambda.json"), &meta)?;
    opts.say(format!("slope {:.4} (gamma {:.4}) over [{t_min:e}, {t_max:e}]", fit.slope, fit.gamma()));
    Ok(EXIT_OK)
}

fn lambda_extra(model: &AnyModel, grid: &[f64]) -> Option<(&'static str, serde_json::Value)> {
    match model {
        AnyModel::Delay(d) => Some(("strong_inclusion", json!(d.check_strong_inclusion(grid)))),
        AnyModel::Heat(h) => h.config().cost_direction_exponent.map(|e| ("cost_direction_exponent", json!(e))),
    }
}

/// Solves, simulates open-loop and greedy policies and checks that the value
/// is dominated by every simulated cost; writes `simulate.json` and
/// `simulate.csv`.
pub fn cmd_simulate(config: &Path, opts: &RunOptions) -> i32 {
    finish(simulate_inner(config, opts))
}

fn simulate_inner(config: &Path, opts: &RunOptions) -> Result<i32> {
    let cfg = load(config, opts)?;
    cfg.validate()?;
    let out = opts.out_dir(&cfg)?;
    let model = cfg.build_model()?;
    let (ham, phi, ell0) = (cfg.hamiltonian()?, cfg.phi()?, cfg.ell0()?);
    let seed = cfg.solver.seed;
    match &model {
        AnyModel::Heat(m) => {
            let x0 = cfg.heat_state(m)?;
            simulate_model(m, &x0, &cfg, &ham, &phi, &ell0, seed, &out, opts)
        }
        AnyModel::Delay(m) => {
            let x0 = cfg.delay_state(m)?;
            simulate_model(m, &x0, &cfg, &ham, &phi, &ell0, seed, &out, opts)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_model<M: ProjectedModel>(
    model: &M,
    x0: &M::State,
    cfg: &RunConfig,
    ham: &Hamiltonian,
    phi: &CostExpr,
    ell0: &TimeCost,
    seed: u64,
    out: &Path,
    opts: &RunOptions,
) -> Result<i32> {
    let s = &cfg.simulate;
    let sol = picard_solve(model, ham, phi, ell0, &cfg.solver)?;
    let cost = CostSpec { ham, phi, ell0, horizon: cfg.solver.horizon };
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 101));
    let mut policies: Vec<(String, Policy)> =
        (0..s.open_loop_policies).map(|k| (format!("open-loop-{k}"), Policy::random_open_loop(ham.len(), s.time_steps, &mut rng))).collect();
    if s.greedy {
        policies.push(("greedy".into(), Policy::Greedy));
    }
    let mut shifted = sol.clone();
    shifted.iterate.f.iter_mut().for_each(|v| *v += s.value_offset);
    let rep = dominance_report(model, &cost, &shifted, &policies, s.t0, x0, s.n_samples, s.time_steps, crate::derive_seed(seed, 202))?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("simulate.csv"))?);
    writeln!(csv, "policy,sample,cost")?;
    for p in &rep.policies {
        for (i, c) in p.sample_costs.iter().enumerate() {
            writeln!(csv, "{},{i},{}", p.name, fmt_float(*c))?;
        }
    }
    csv.flush()?;
    let verdict = rep.check();
    let status = if verdict.is_ok() { "dominated" } else { "violated" };
    write_json(&out.join("simulate.json"), &json!({ "status": status, "report": rep, "solver": sol.metadata() }))?;
    verdict?;
    opts.say(format!("value {:.6}; {} policies dominated", rep.value, rep.policies.len()));
    if let Some(g) = rep.greedy_gap {
        opts.say(format!("greedy gap {g:.6} (diagnostic)"));
    }
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, r: Result<String>) -> InvariantOutcome {
    match r {
        Ok(detail) => InvariantOutcome { name: name.into(), passed: true, detail },
        Err(e) => InvariantOutcome { name: name.into(), passed: false, detail: e.to_string() },
    }
}

fn require(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(msg.into()))
    }
}

/// Runs the invariant suite at reduced sizes; writes `check.json`.
pub fn cmd_check(config: &Path, opts: &RunOptions) -> i32 {
    finish(check_inner(config, opts))
}

fn check_inner(config: &Path, opts: &RunOptions) -> Result<i32> {
    let cfg = load(config, opts)?;
    cfg.validate()?;
    let out = opts.out_dir(&cfg)?;
    let results = match cfg.build_model() {
        Ok(model) => with_model!(&model, m => run_invariants(m, &model, &cfg)),
        Err(e) => vec![outcome("model_build", Err(e))],
    };
    let passed = results.iter().all(|r| r.passed);
    write_json(&out.join("check.json"), &json!({ "passed": passed, "invariants": results }))?;
    for r in &results {
        if !r.passed {
            eprintln!("invariant {} failed: {}", r.name, r.detail);
        } else {
            opts.say(format!("ok   {}", r.name));
        }
    }
    Ok(if passed { EXIT_OK } else { EXIT_INVARIANT })
}

/// The invariant suite for one model.
pub fn run_invariants<M: ProjectedModel>(model: &M, any: &AnyModel, cfg: &RunConfig) -> Vec<InvariantOutcome> {
    let horizon = cfg.solver.horizon;
    let n = model.proj_dim();
    let times = [1e-3 * horizon, 1e-2 * horizon, 0.1 * horizon, 0.5 * horizon, horizon];
    let mut res = Vec::new();

    res.push(outcome(
        "covariance_psd",
        (|| {
            for &t in &times {
                model.proj_cov(t).check_psd()?;
            }
            if cfg.check.inject == Some(Injection::PsdViolation) {
                let mut bad = model.proj_cov(horizon).into_inner();
                bad[(0, 0)] = -1.0 - bad[(0, 0)].abs();
                SymPsd::new(bad).check_psd()?;
            }
            Ok(format!("{} times", times.len()))
        })(),
    ));

    res.push(outcome(
        "covariance_monotone",
        (|| {
            for w in times.windows(2) {
                SymPsd::new(model.proj_cov(w[1]).matrix() - model.proj_cov(w[0]).matrix()).check_psd()?;
            }
            Ok("P Q_t P^* nondecreasing".into())
        })(),
    ));

    res.push(outcome(
        "noise_covariance_diagonal",
        (|| {
            for &t in &times {
                let diff = (model.noise_cov(t, t) - model.proj_cov(t).matrix()).abs().max();
                require(diff <= 1e-10 * (1.0 + model.proj_cov(t).matrix().abs().max()), format!("noise_cov(t, t) differs from proj_cov(t) by {diff:e}"))?;
            }
            Ok("noise_cov(t, t) = proj_cov(t)".into())
        })(),
    ));

    res.push(outcome(
        "blowup_exponent",
        (|| {
            let grid = log_grid(1e-4 * horizon, 1e-1 * horizon, 12, &model.control_breakpoints(), 0.1);
            let fit = fit_blowup(model, &grid)?;
            require(fit.gamma() > 0.0 && fit.gamma() < 1.0, format!("fitted exponent {:.3} outside (0, 1)", fit.gamma()))?;
            Ok(format!("gamma {:.4}", fit.gamma()))
        })(),
    ));

    let rule = build_quadrature(n, if n <= 2 { QuadratureKind::TensorHermite } else { QuadratureKind::MonteCarlo }, if n <= 2 { 12 } else { 20_000 }, 3);

    res.push(outcome(
        "cameron_martin_normalization",
        (|| {
            let rule = rule.clone()?;
            let cov = model.proj_cov(horizon);
            let shift = model.proj_control(horizon) * nalgebra::DVector::from_element(model.control_dim(), 0.1);
            let l = crate::spectral::psd_sqrt(&cov)?;
            let mut total = 0.0;
            for (xi, w) in rule.iter() {
                let z = l.matrix() * nalgebra::DVector::from_column_slice(xi);
                total += w * cameron_martin_density(&cov, shift.as_slice(), z.as_slice(), 1e-12)?;
            }
            let tol = if n <= 2 { 1e-6 } else { 0.05 };
            require((total - 1.0).abs() < tol, format!("density integrates to {total}"))?;
            Ok(format!("integral {total:.8}"))
        })(),
    ));

    res.push(outcome(
        "semigroup_constants",
        (|| {
            let rule = rule.clone()?;
            let c = FnCost::new(|_: &[f64]| 2.0, 2.0);
            let v = semigroup_apply(model, &c, 0.3 * horizon, &vec![0.1; n], &rule)?.value;
            require((v - 2.0).abs() < 1e-12, format!("R_t[2] = {v}"))?;
            Ok("R_t preserves constants".into())
        })(),
    ));

    res.push(outcome(
        "c_gradient_bound",
        (|| {
            let rule = rule.clone()?;
            let phi = cfg.phi()?;
            for &t in &times {
                let chk = c_gradient_norm_bound_check(model, &phi, t, &vec![0.05; n], &rule)?;
                require(chk.ok, format!("t = {t}: |grad| = {} > {}", chk.lhs, chk.rhs))?;
            }
            Ok(format!("{} times", times.len()))
        })(),
    ));

    if let AnyModel::Delay(d) = any {
        res.push(outcome(
            "kalman_rank",
            (|| {
                let rank = d.kalman_rank();
                let inclusion = d.check_strong_inclusion(&times);
                Ok(format!("rank {rank} of {}, strong inclusion {inclusion}", d.config().n))
            })(),
        ));
    }

    res.push(outcome(
        "hamiltonian_tie_break",
        (|| {
            let ham = cfg.hamiltonian()?;
            let p = vec![0.0; ham.control_dim()];
            let (v, j) = ham.h_min(&p);
            let first = (0..ham.len()).find(|&k| ham.running_cost(k) == ham.min_running_cost()).unwrap_or(0);
            require(j == first && v == ham.min_running_cost(), "argmin at p = 0 is not the first minimal running cost")?;
            Ok(format!("argmin index {j}"))
        })(),
    ));

    res.push(outcome(
        "picard_small_solve",
        (|| {
            let mut solver = cfg.solver.clone();
            solver.time_nodes = Some(10);
            solver.space_points = solver.space_points.min(13);
            solver.semigroup_order = solver.semigroup_order.min(8);
            solver.conv_order = solver.conv_order.min(4);
            solver.time_order = solver.time_order.min(4);
            let (ham, phi, ell0) = (cfg.hamiltonian()?, cfg.phi()?, cfg.ell0()?);
            let sol = picard_solve(model, &ham, &phi, &ell0, &solver)?;
            for p in 0..sol.iterate.space.len() {
                let y = sol.iterate.space.point(p);
                require(sol.iterate.f_at(0, p) == crate::ou::TerminalCost::eval(&phi, &y), "terminal layer differs from phi_bar")?;
            }
            Ok(format!("{} iterations, residual {:.2e}", sol.iterations, sol.residual))
        })(),
    ));

    res
}
