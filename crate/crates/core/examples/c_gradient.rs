//! C-directional derivative of `R_t[phi]` through the Gaussian
//! integration-by-parts formula, compared with a central finite difference
//! along the projected control direction.

use mildhjb::heat::{HeatConfig, HeatModel};
use mildhjb::ou::{semigroup_apply, FnCost, ProjectedModel};
use mildhjb::smoothing::{c_gradient_norm_bound_check, c_gradient_semigroup};
use mildhjb::spectral::{build_quadrature, QuadratureKind};

fn main() -> mildhjb::Result<()> {
    let model = HeatModel::new(HeatConfig::default())?;
    let phi = FnCost::new(|y: &[f64]| (2.0 * y[0] - y[1]).sin(), 1.0);
    let rule = build_quadrature(2, QuadratureKind::TensorHermite, 12, 0)?;
    let y0 = [0.1, -0.2];
    let h = 1e-5;

    for t in [0.01, 0.05, 0.2, 1.0] {
        let grad = c_gradient_semigroup(&model, &phi, t, &y0, &rule)?;
        let pc = model.proj_control(t);
        print!("t = {t:<5}");
        for k in 0..model.control_dim() {
            let dir = pc.column(k);
            let shifted = |s: f64| [y0[0] + s * dir[0], y0[1] + s * dir[1]];
            let fd = (semigroup_apply(&model, &phi, t, &shifted(h), &rule)?.value - semigroup_apply(&model, &phi, t, &shifted(-h), &rule)?.value) / (2.0 * h);
            print!("  k={k}: formula {:>10.6}  fd {:>10.6}", grad.value[k], fd);
        }
        let bound = c_gradient_norm_bound_check(&model, &phi, t, &y0, &rule)?;
        println!("  |grad| {:.4} <= {:.4}", bound.lhs, bound.rhs);
    }
    Ok(())
}
