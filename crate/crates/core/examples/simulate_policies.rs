//! Monte Carlo costs of random open-loop policies and of the greedy feedback
//! built from a solution, compared with the value function.

use std::path::Path;

use mildhjb::config::{AnyModel, RunConfig};
use mildhjb::harness::{value_dominance_check, CostSpec, Policy};
use mildhjb::hjb::picard_solve;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mildhjb::Result<()> {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/delay.toml"))?;
    let AnyModel::Delay(model) = cfg.build_model()? else { unreachable!() };
    let (ham, phi, ell0) = (cfg.hamiltonian()?, cfg.phi()?, cfg.ell0()?);
    let sol = picard_solve(&model, &ham, &phi, &ell0, &cfg.solver)?;
    let cost = CostSpec { ham: &ham, phi: &phi, ell0: &ell0, horizon: cfg.solver.horizon };
    let steps = cfg.simulate.time_steps;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut policies: Vec<(String, Policy)> = (0..5).map(|k| (format!("random-{k}"), Policy::random_open_loop(ham.len(), steps, &mut rng))).collect();
    policies.push(("zero".into(), Policy::Constant { index: ham.len() / 2 }));
    policies.push(("greedy".into(), Policy::Greedy));

    let x0 = cfg.delay_state(&model)?;
    let report = value_dominance_check(&model, &cost, &sol, &policies, 0.0, &x0, 4000, steps, 11)?;
    println!("v(0, x0) = {:.5}", report.value);
    for p in &report.policies {
        println!("{:<10} cost {:.5} +- {:.5}   gap {:+.5}", p.name, p.mean, p.std_error, p.gap);
    }
    Ok(())
}
