//! Picard solve of the HJB equation for the boundary-controlled heat equation
//! from the shipped configuration.
//!
//! ```text
//! cargo run --release --example solve_heat
//! ```

use std::path::Path;

use mildhjb::config::{AnyModel, RunConfig};
use mildhjb::hjb::picard_solve;

fn main() -> mildhjb::Result<()> {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/heat.toml"))?;
    cfg.validate()?;
    let AnyModel::Heat(model) = cfg.build_model()? else { unreachable!() };
    let sol = picard_solve(&model, &cfg.hamiltonian()?, &cfg.phi()?, &cfg.ell0()?, &cfg.solver)?;
    println!("gamma {:.4}, eta {}, {} iterations", sol.gamma, sol.eta, sol.iterations);
    for (k, r) in sol.residuals.iter().enumerate() {
        println!("    residual[{k}] = {r:.3e}");
    }
    let x = cfg.heat_state(&model)?;
    for t in [0.0, 0.5, 0.9] {
        let v = sol.eval_value(&model, t, &x)?;
        let g = sol.eval_c_gradient(&model, t, &x)?;
        println!("v({t}, x0) = {v:.6}   grad^C = [{:.5}, {:.5}]", g[0], g[1]);
    }
    println!("kappa1 = {:.4}", sol.kappa1);
    Ok(())
}
