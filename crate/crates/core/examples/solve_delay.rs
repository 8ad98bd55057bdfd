//! Picard solve for the SDE with delay in the control, starting from a
//! state generated by a constant past control.

use std::path::Path;

use mildhjb::config::{AnyModel, RunConfig};
use mildhjb::hjb::picard_solve;

fn main() -> mildhjb::Result<()> {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/delay.toml"))?;
    cfg.validate()?;
    let AnyModel::Delay(model) = cfg.build_model()? else { unreachable!() };
    let sol = picard_solve(&model, &cfg.hamiltonian()?, &cfg.phi()?, &cfg.ell0()?, &cfg.solver)?;
    println!("gamma {:.4}, eta {}, {} iterations, residual {:.2e}", sol.gamma, sol.eta, sol.iterations, sol.residual);
    println!("contraction estimates {:?}", sol.contraction_estimates);
    let x = cfg.delay_state(&model)?;
    for t in [0.0, 0.25, 0.5, 0.75] {
        println!("v({t}, x0) = {:.6}", sol.eval_value(&model, t, &x)?);
    }
    Ok(())
}
