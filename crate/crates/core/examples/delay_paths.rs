//! Euler-Maruyama on the delayed SDE against the exact Gaussian law of the
//! lifted OU state.

use mildhjb::delay::{DelayConfig, DelayModel};
use mildhjb::ou::ProjectedModel;
use nalgebra::DVector;

fn main() -> mildhjb::Result<()> {
    let model = DelayModel::new(DelayConfig::scalar(-0.3, 1.0, 0.5, 0.4, 0.8))?;
    let x0 = DVector::from_vec(vec![0.5]);
    let past = |_: f64| DVector::from_vec(vec![1.0]);
    let control = |t: f64| DVector::from_vec(vec![(3.0 * t).sin()]);
    let horizon = 1.0;

    let paths = model.simulate_euler_maruyama(&x0, &past, &control, horizon, 1000, 20_000, 5);
    let n = paths.len() as f64;
    let mean = paths.iter().map(|y| y[0]).sum::<f64>() / n;
    let var = paths.iter().map(|y| (y[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);

    let state = model.state_from_past_control(x0, 64, past)?;
    let free = model.proj_semigroup_apply(horizon, &state)[0];
    // P e^{(T - r)A} C jumps where T - r equals the delay
    let (x, w) = mildhjb::spectral::gauss_legendre_unit(32);
    let mut driven = 0.0;
    for (a, b) in [(0.0, horizon - model.delay()), (horizon - model.delay(), horizon)] {
        for (xi, wi) in x.iter().zip(&w) {
            let r = a + (b - a) * xi;
            driven += wi * (b - a) * model.proj_control(horizon - r)[(0, 0)] * control(r)[0];
        }
    }
    println!("Euler-Maruyama mean {mean:.5}  variance {var:.5}");
    println!("exact          mean {:.5}  variance {:.5}", free + driven, model.proj_cov(horizon).matrix()[(0, 0)]);
    Ok(())
}
