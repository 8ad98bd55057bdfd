use std::sync::OnceLock;

use mildhjb::config::{CostExpr, Monomial};
use mildhjb::delay::{gramian, DelayConfig};
use mildhjb::heat::{HeatConfig, HeatModel, ProjectionSpec};
use mildhjb::hjb::{weighted_distance, Hamiltonian, SpaceGrid, ValueIterate};
use mildhjb::ou::{cameron_martin_density, semigroup_apply, FnCost, TerminalCost};
use mildhjb::smoothing::lambda_operator;
use mildhjb::spectral::{build_quadrature, gauss_expectation, psd_pinv_sqrt, psd_sqrt, GaussianMeasure, QuadratureKind, SymPsd};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn heat() -> &'static HeatModel {
    static M: OnceLock<HeatModel> = OnceLock::new();
    M.get_or_init(|| HeatModel::new(HeatConfig::default()).unwrap())
}

fn heat_modes() -> &'static HeatModel {
    static M: OnceLock<HeatModel> = OnceLock::new();
    M.get_or_init(|| HeatModel::new(HeatConfig { projection: ProjectionSpec::Modes { indices: vec![1, 2] }, ..HeatConfig::default() }).unwrap())
}

fn matrix(n: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * c).prop_map(move |v| DMatrix::from_vec(n, c, v))
}

fn spd(max_dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_dim).prop_flat_map(|n| matrix(n, n)).prop_map(|b| {
        let n = b.nrows();
        &b * b.transpose() + DMatrix::identity(n, n) * 0.1
    })
}

/// Tall factor `b`; the test matrix is `b b^T`.
fn low_rank_factor() -> impl Strategy<Value = DMatrix<f64>> {
    (2..=8usize, 1..=8usize).prop_flat_map(|(n, r)| matrix(n, r.min(n - 1).max(1)))
}

fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn double_factorial_moment(p: u32) -> f64 {
    if p % 2 == 1 {
        0.0
    } else {
        (1..p).step_by(2).map(|k| k as f64).product()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sqrt_squares_back(m in spd(20)) {
        let s = psd_sqrt(&SymPsd::new(m.clone())).unwrap();
        prop_assert!(frobenius_rel(&(s.matrix() * s.matrix()), &m) < 1e-10);
    }

    #[test]
    fn pinv_sqrt_times_sqrt_projects_onto_image(b in low_rank_factor()) {
        let sym = SymPsd::new(&b * b.transpose());
        let (p, rank) = psd_pinv_sqrt(&sym, 1e-12).unwrap();
        let prod = p.matrix() * psd_sqrt(&sym).unwrap().matrix();
        let gram = (b.transpose() * &b).try_inverse().unwrap();
        let projector = &b * gram * b.transpose();
        prop_assert_eq!(rank, b.ncols());
        prop_assert!((prod - projector).abs().max() < 1e-8);
    }

    #[test]
    fn tensor_hermite_is_exact_for_polynomials(order in 1..=10usize, p0 in 0..20u32, p1 in 0..20u32) {
        let p0 = p0 % (2 * order as u32);
        let p1 = p1 % (2 * order as u32);
        let rule = build_quadrature(2, QuadratureKind::TensorHermite, order, 0).unwrap();
        let mu = GaussianMeasure::centered(SymPsd::identity(2));
        let got = gauss_expectation(|z| z[0].powi(p0 as i32) * z[1].powi(p1 as i32), &mu, &rule).unwrap().value;
        let exact = double_factorial_moment(p0) * double_factorial_moment(p1);
        // rounding is relative to the absolute moment, not to the signed one
        let scale = double_factorial_moment(p0 + p0 % 2) * double_factorial_moment(p1 + p1 % 2);
        prop_assert!((got - exact).abs() <= 1e-12 * scale, "{got} vs {exact}");
    }

    #[test]
    fn monte_carlo_is_reproducible(seed in any::<u64>(), dim in 1..6usize) {
        let a = build_quadrature(dim, QuadratureKind::MonteCarlo, 200, seed).unwrap();
        let b = build_quadrature(dim, QuadratureKind::MonteCarlo, 200, seed).unwrap();
        let f = |z: &[f64]| z.iter().map(|v| v.sin()).sum::<f64>();
        let (ea, eb) = (a.expect(f), b.expect(f));
        prop_assert_eq!(ea.value.to_bits(), eb.value.to_bits());
        prop_assert_eq!(ea.std_error.to_bits(), eb.std_error.to_bits());
    }

    #[test]
    fn shift_identity_for_cubics(b in matrix(2, 2), y in prop::collection::vec(-1.0..1.0f64, 2), c in prop::collection::vec(-1.0..1.0f64, 4)) {
        let cov = SymPsd::new(&b * b.transpose() + DMatrix::identity(2, 2) * 0.2);
        let g = |z: &[f64]| c[0] + c[1] * z[0] + c[2] * z[0] * z[1] + c[3] * z[1].powi(3);
        let rule = build_quadrature(2, QuadratureKind::TensorHermite, 20, 0).unwrap();
        let l = psd_sqrt(&cov).unwrap();
        let (mut tilted, mut direct) = (0.0, 0.0);
        for (xi, w) in rule.iter() {
            let z = l.matrix() * DVector::from_column_slice(xi);
            tilted += w * g(z.as_slice()) * cameron_martin_density(&cov, &y, z.as_slice(), 1e-12).unwrap();
            direct += w * g(&[z[0] + y[0], z[1] + y[1]]);
        }
        prop_assert!((tilted - direct).abs() < 1e-6, "{tilted} vs {direct}");
    }

    #[test]
    fn semigroup_is_monotone_and_bounded(t in 1e-3..1.0f64, y in prop::collection::vec(-2.0..2.0f64, 2), shift in 0.0..0.5f64) {
        let model = heat();
        let rule = build_quadrature(2, QuadratureKind::TensorHermite, 12, 0).unwrap();
        let lo = FnCost::new(|z: &[f64]| (z[0] - z[1]).tanh(), 1.0);
        let hi = FnCost::new(move |z: &[f64]| (z[0] - z[1]).tanh() + shift * (z[0] * z[1]).cos().abs(), 1.0 + shift);
        let a = semigroup_apply(model, &lo, t, &y, &rule).unwrap().value;
        let b = semigroup_apply(model, &hi, t, &y, &rule).unwrap().value;
        prop_assert!(a <= b + 1e-12);
        prop_assert!(a.abs() <= lo.bound() && b.abs() <= hi.bound());
    }

    #[test]
    fn lambda_norm_is_continuous(t in 1e-4..0.9f64) {
        let a = lambda_operator(heat(), t, 0.0).unwrap().norm();
        let b = lambda_operator(heat(), 1.05 * t, 0.0).unwrap().norm();
        prop_assert!((a - b).abs() < 0.1 * a.max(b));
    }

    #[test]
    fn heat_control_stays_in_covariance_image(t in 1e-4..1.0f64) {
        prop_assert!(lambda_operator(heat(), t, 0.0).unwrap().residual < 1e-6);
    }

    #[test]
    fn gramian_is_monotone(a in matrix(2, 2), s in matrix(2, 2), t1 in 0.01..1.0f64, dt in 0.01..1.0f64) {
        let cfg = DelayConfig::from_matrices(&a, &DMatrix::from_element(2, 1, 1.0), &s, 0.3);
        let g1 = gramian(&cfg, t1).unwrap();
        let g2 = gramian(&cfg, t1 + dt).unwrap();
        prop_assert!(SymPsd::new(g2.matrix() - g1.matrix()).min_eigenvalue() >= -1e-10);
    }

    #[test]
    fn h_min_is_the_minimum(points in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, 0.0..1.0f64), 1..12), p in prop::collection::vec(-3.0..3.0f64, 2), q in prop::collection::vec(-3.0..3.0f64, 2)) {
        let controls: Vec<Vec<f64>> = points.iter().map(|&(a, b, _)| vec![a, b]).collect();
        let costs: Vec<f64> = points.iter().map(|&(_, _, c)| c).collect();
        let ham = Hamiltonian::new(controls.clone(), costs.clone()).unwrap();
        let (v, j) = ham.h_min(&p);
        for (k, (u, c)) in controls.iter().zip(&costs).enumerate() {
            let val = u[0] * p[0] + u[1] * p[1] + c;
            prop_assert!(v <= val);
            if k < j {
                prop_assert!(val > v);
            }
        }
        let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        prop_assert!((ham.h_min(&p).0 - ham.h_min(&q).0).abs() <= ham.lipschitz() * dist + 1e-12);
    }

    #[test]
    fn weighted_distance_is_a_metric(seed in any::<u64>(), eta in 0.0..10.0f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let space = SpaceGrid::new(vec![-1.0, -1.0], vec![1.0, 1.0], 4).unwrap();
        let grid = vec![0.0, 0.1, 0.5, 1.0];
        let mut random = || {
            let mut g = ValueIterate::zeros(grid.clone(), space.clone(), 1, 0.5);
            g.f.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let ns = space.len();
            g.fbar[ns..].iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            g
        };
        let (a, b, c) = (random(), random(), random());
        let d = |x: &ValueIterate, y: &ValueIterate, e: f64| weighted_distance(x, y, e).unwrap();
        prop_assert_eq!(d(&a, &a, eta), 0.0);
        prop_assert_eq!(d(&a, &b, eta), d(&b, &a, eta));
        prop_assert!(d(&a, &c, eta) <= d(&a, &b, eta) + d(&b, &c, eta) + 1e-15);
        prop_assert!(d(&a, &b, eta + 1.0) <= d(&a, &b, eta));
    }

    #[test]
    fn cost_expressions_respect_their_bound(y in prop::collection::vec(-5.0..5.0f64, 2), k in 0.1..3.0f64, c in -2.0..2.0f64) {
        let e = CostExpr::Sum { terms: vec![
            CostExpr::Constant { value: c },
            CostExpr::TanhClamp { bound: k, inner: Box::new(CostExpr::Polynomial { terms: vec![Monomial { coeff: 3.0, powers: vec![3, 1] }] }) },
            CostExpr::SmoothIndicator { center: vec![0.5, 0.0], radius: 1.0, sharpness: 4.0, height: -1.5 },
        ] };
        e.validate(2).unwrap();
        prop_assert!(e.eval(&y).abs() <= e.sup_bound() + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// `R_t R_s = R_{t+s}` with modal projection, where `P e^{sA}` acts on
    /// the projected state as `diag(e^{-s}, e^{-4s})`.
    #[test]
    fn chapman_kolmogorov(t in 0.01..0.5f64, s in 0.01..0.5f64, y in prop::collection::vec(-1.0..1.0f64, 2)) {
        let model = heat_modes();
        let rule = build_quadrature(2, QuadratureKind::TensorHermite, 24, 0).unwrap();
        let phi = FnCost::new(|z: &[f64]| (1.5 * z[0] - z[1]).tanh(), 1.0);
        let decay = [(-s).exp(), (-4.0 * s).exp()];
        let inner = FnCost::new(|z: &[f64]| {
            let moved = [decay[0] * z[0], decay[1] * z[1]];
            semigroup_apply(model, &phi, s, &moved, &rule).unwrap().value
        }, 1.0);
        let composed = semigroup_apply(model, &inner, t, &y, &rule).unwrap().value;
        let moved = [decay[0] * y[0], decay[1] * y[1]];
        let direct = semigroup_apply(model, &phi, t + s, &moved, &rule).unwrap().value;
        prop_assert!((composed - direct).abs() < 1e-6, "{composed} vs {direct}");
    }
}
