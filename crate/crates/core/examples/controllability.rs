//! Kalman rank, controllability Gramian and the strong inclusion test for the
//! delay model.

use mildhjb::delay::{DelayConfig, DelayModel};
use mildhjb::Error;

fn main() -> mildhjb::Result<()> {
    let d = DelayConfig::scalar(-0.5, 1.0, 0.4, 0.2, 0.7);
    let model = DelayModel::new(d)?;
    println!("scalar: rank {}", model.kalman_rank());
    for t in [0.1, 0.5, 1.0] {
        println!("    Gramian({t}) = {:.6}", model.gramian(t).matrix()[(0, 0)]);
    }

    // noise only drives the second coordinate, but the drift couples them
    let coupled = DelayConfig {
        n: 2,
        m: 1,
        k: 1,
        a0: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
        b0: vec![vec![1.0], vec![0.0]],
        sigma: vec![vec![0.0], vec![1.0]],
        d: 0.5,
        b1_atoms: vec![],
        b1_density: None,
        history_points: 64,
    };
    let model = DelayModel::new(coupled.clone())?;
    println!("coupled: rank {}, strong inclusion {}", model.kalman_rank(), model.check_strong_inclusion(&[1e-3, 1e-2, 0.1]));

    let stuck = DelayConfig { a0: vec![vec![0.0, 0.0], vec![0.0, 0.0]], ..coupled };
    match DelayModel::new(stuck) {
        Err(e @ Error::RankDeficient { .. }) => println!("decoupled: {e}"),
        other => println!("decoupled: unexpected {:?}", other.map(|m| m.kalman_rank())),
    }
    Ok(())
}
