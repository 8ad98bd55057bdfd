//! Cameron-Martin density of a shifted Gaussian: normalisation and the shift
//! identity `E[f(Z + y)] = E[f(Z) d(Z)]`.

use mildhjb::heat::{HeatConfig, HeatModel};
use mildhjb::ou::{cameron_martin_density, ProjectedModel};
use mildhjb::spectral::{build_quadrature, psd_sqrt, QuadratureKind};
use nalgebra::DVector;

fn main() -> mildhjb::Result<()> {
    let model = HeatModel::new(HeatConfig::default())?;
    let cov = model.proj_cov(0.5);
    let shift = model.proj_control(0.5) * DVector::from_vec(vec![0.3, -0.2]);
    let l = psd_sqrt(&cov)?;
    let rule = build_quadrature(2, QuadratureKind::TensorHermite, 24, 0)?;
    let f = |z: &[f64]| (z[0] - z[1]).cos();

    let (mut mass, mut tilted, mut direct) = (0.0, 0.0, 0.0);
    for (xi, w) in rule.iter() {
        let z = l.matrix() * DVector::from_column_slice(xi);
        let d = cameron_martin_density(&cov, shift.as_slice(), z.as_slice(), 1e-12)?;
        mass += w * d;
        tilted += w * f(z.as_slice()) * d;
        direct += w * f((&z + &shift).as_slice());
    }
    println!("integral of density   {mass:.12}");
    println!("E f(Z + y)            {direct:.12}");
    println!("E f(Z) d(Z)           {tilted:.12}");
    Ok(())
}
