//! Blow-up of the smoothing operator norm `|Lambda(t)|` as `t -> 0` for the
//! heat and delay models, with fitted power laws.
//!
//! ```text
//! cargo run --release --example blowup_rates
//! ```

use mildhjb::delay::{Atom, DelayConfig, DelayModel};
use mildhjb::heat::{HeatConfig, HeatModel, ProjectionSpec};
use mildhjb::ou::ProjectedModel;
use mildhjb::smoothing::{fit_blowup, log_grid, BlowupFit};

fn report(name: &str, fit: &BlowupFit) {
    println!("{name:<22} slope {:>8.4}  rms {:.2e}  ({} points)", fit.slope, fit.residual, fit.fitted_points);
}

fn main() -> mildhjb::Result<()> {
    let heat = HeatModel::new(HeatConfig::default())?;
    let grid = log_grid(1e-4, 1e-1, 20, &[], 0.1);
    let fit = fit_blowup(&heat, &grid)?;
    report("heat, two bumps", &fit);
    for (t, v) in fit.times.iter().zip(&fit.norms).step_by(5) {
        println!("    t = {t:.3e}  |Lambda| = {v:.4e}");
    }

    let full = HeatModel::unchecked(HeatConfig { projection: ProjectionSpec::Identity, ..HeatConfig::default() })?;
    report("heat, all modes", &fit_blowup(&full, &grid)?);

    let cfg = DelayConfig {
        n: 2,
        m: 1,
        k: 2,
        a0: vec![vec![-0.2, 0.5], vec![-0.5, -0.2]],
        b0: vec![vec![0.0], vec![1.0]],
        sigma: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
        d: 0.5,
        b1_atoms: vec![Atom { location: -0.5, weight: vec![vec![0.0], vec![0.5]] }],
        b1_density: None,
        history_points: 64,
    };
    let delay = DelayModel::new(cfg)?;
    let grid = log_grid(1e-4, 1e-1, 20, &delay.control_breakpoints(), 0.1);
    report("delay, one atom", &fit_blowup(&delay, &grid)?);

    // scalar delay: |Lambda(t)| = (1 + c 1{t >= d}) / sqrt(t)
    let scalar = DelayModel::new(DelayConfig::scalar(0.0, 1.0, 1.0, 0.3, 0.5))?;
    for t in [0.1, 0.29, 0.31, 1.0] {
        let v = mildhjb::smoothing::lambda_operator(&scalar, t, 0.0)?.norm();
        let exact = (1.0 + if t >= 0.3 { 0.5 } else { 0.0 }) / t.sqrt();
        println!("scalar delay t = {t:<5} |Lambda| = {v:.10}  exact {exact:.10}");
    }
    Ok(())
}
