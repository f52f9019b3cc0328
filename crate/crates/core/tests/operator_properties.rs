use conehjb::cone::{ConeSpec, CostMatrix};
use conehjb::levy::{JumpAtom, LevyModel};
use conehjb::lyapunov::LinearPowerField;
use conehjb::operator::{fd_gradient, fd_hessian, nonlocal_i_with_gradient, Combination, FnField, QuadraticField};
use conehjb::{ScalarField, UtilitySpec};
use proptest::prelude::*;

fn cone(l: f64) -> ConeSpec {
    ConeSpec::from_costs(&CostMatrix::uniform(2, l).unwrap()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `exp(0.3 x1 - 0.2 x2) + sin(x1 x2)` with hand-derived derivatives.
fn smooth_field() -> (impl Fn(&[f64]) -> f64 + Sync, impl Fn(&[f64]) -> Vec<f64>, impl Fn(&[f64]) -> Vec<Vec<f64>>) {
    let f = |x: &[f64]| (0.3 * x[0] - 0.2 * x[1]).exp() + (x[0] * x[1]).sin();
    let g = |x: &[f64]| {
        let e = (0.3 * x[0] - 0.2 * x[1]).exp();
        let c = (x[0] * x[1]).cos();
        vec![0.3 * e + x[1] * c, -0.2 * e + x[0] * c]
    };
    let h = |x: &[f64]| {
        let e = (0.3 * x[0] - 0.2 * x[1]).exp();
        let (s, c) = (x[0] * x[1]).sin_cos();
        vec![
            vec![0.09 * e - x[1] * x[1] * s, -0.06 * e + c - x[0] * x[1] * s],
            vec![-0.06 * e + c - x[0] * x[1] * s, 0.04 * e - x[0] * x[0] * s],
        ]
    };
    (f, g, h)
}

fn observed_order(errors: &[f64]) -> f64 {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min)
}

#[test]
fn fd_derivatives_are_second_order_on_analytic_fields() {
    let (f, g, h) = smooth_field();
    let field = FnField::new(2, false, f);
    let power = LinearPowerField { p: vec![1.0, 0.7], rho: 0.4 };
    let steps = [0.08, 0.04, 0.02, 0.01];
    for x in [[0.7, 1.3], [1.5, -0.4], [0.2, 0.9]] {
        let ge: Vec<f64> = steps.iter().map(|&s| max_abs_diff(&fd_gradient(&field, &x, s), &g(&x))).collect();
        let he: Vec<f64> = steps
            .iter()
            .map(|&s| {
                let fd = fd_hessian(&field, &x, s);
                let ex = h(&x);
                (0..2).map(|i| max_abs_diff(&fd[i], &ex[i])).fold(0.0, f64::max)
            })
            .collect();
        assert!(observed_order(&ge) >= 1.8, "gradient errors {ge:?}");
        assert!(observed_order(&he) >= 1.8, "hessian errors {he:?}");
    }
    for x in [[1.0, 1.0], [2.0, 0.3]] {
        let ag = power.gradient(&x).unwrap();
        let ah = power.hessian(&x).unwrap();
        let ge: Vec<f64> = steps.iter().map(|&s| max_abs_diff(&fd_gradient(&power, &x, s), &ag)).collect();
        let he: Vec<f64> = steps
            .iter()
            .map(|&s| {
                let fd = fd_hessian(&power, &x, s);
                (0..2).map(|i| max_abs_diff(&fd[i], &ah[i])).fold(0.0, f64::max)
            })
            .collect();
        assert!(observed_order(&ge) >= 1.8, "power gradient errors {ge:?}");
        assert!(observed_order(&he) >= 1.8, "power hessian errors {he:?}");
    }
}

#[test]
fn nonlocal_integral_is_additive_in_atoms() {
    let k = cone(0.05);
    let a = JumpAtom { z: vec![0.0, -0.3], lam: 0.5 };
    let b = JumpAtom { z: vec![0.1, 0.4], lam: 1.3 };
    let c = JumpAtom { z: vec![-0.2, -0.95], lam: 0.7 };
    let model = |atoms: Vec<JumpAtom>| LevyModel::new(vec![0.0, 0.07], vec![vec![0.0], vec![0.3]], atoms).unwrap();
    let f = LinearPowerField { p: vec![1.0, 0.9], rho: 0.3 };
    for x in [[0.5, 0.5], [-0.02, 0.8], [1.0, 0.01]] {
        let g = f.gradient(&x).unwrap();
        let whole = nonlocal_i_with_gradient(&f, &x, &g, &model(vec![a.clone(), b.clone(), c.clone()]), &k).unwrap();
        let parts: f64 = [a.clone(), b.clone(), c.clone()]
            .into_iter()
            .map(|atom| nonlocal_i_with_gradient(&f, &x, &g, &model(vec![atom]), &k).unwrap())
            .sum();
        assert!((whole - parts).abs() <= 1e-12 * (1.0 + whole.abs()), "{whole} vs {parts}");
    }
}

proptest! {
    #[test]
    fn young_fenchel_inequality(gamma in 0.05f64..0.95, p1 in 1e-3f64..20.0, c in 0.0f64..100.0) {
        let u = UtilitySpec::new(gamma, 0.1).unwrap();
        let dual = u.fenchel_dual(&[p1, 0.0]).unwrap();
        prop_assert!(u.utility(c) - p1 * c <= dual.value + 1e-12 * (1.0 + dual.value.abs()));
        let cs = dual.c_star.unwrap();
        let at = u.utility(cs) - p1 * cs;
        prop_assert!((at - dual.value).abs() <= 1e-10 * (1.0 + dual.value.abs()));
    }

    #[test]
    fn dual_nonincreasing_along_dual_cone(
        gamma in 0.05f64..0.95,
        p in prop::collection::vec(0.01f64..5.0, 2),
        t in 0.0f64..1.0,
        s in 0.0f64..3.0,
    ) {
        let k = cone(0.1);
        let n = k.facet_normals();
        let (a, b) = (&n[0], &n[1]);
        // q is a nonnegative combination of the extreme rays of K*
        let q = [s * (t * a[0] + (1.0 - t) * b[0]), s * (t * a[1] + (1.0 - t) * b[1])];
        prop_assert!(k.dual_contains(&q, 1e-12).unwrap());
        let u = UtilitySpec::new(gamma, 0.2).unwrap();
        let base = u.fenchel_dual(&p).unwrap().value;
        let moved = u.fenchel_dual(&[p[0] + q[0], p[1] + q[1]]).unwrap().value;
        prop_assert!(moved <= base * (1.0 + 1e-12));
    }

    #[test]
    fn dual_is_convex_in_price(gamma in 0.05f64..0.95, a in 0.01f64..5.0, b in 0.01f64..5.0, t in 0.0f64..1.0) {
        let u = UtilitySpec::new(gamma, 0.2).unwrap();
        let v = |p: f64| u.fenchel_dual(&[p]).unwrap().value;
        let mid = v(t * a + (1.0 - t) * b);
        prop_assert!(mid <= (t * v(a) + (1.0 - t) * v(b)) * (1.0 + 1e-12));
    }

    #[test]
    fn nonlocal_integral_is_linear_in_the_field(
        wa in -3.0f64..3.0,
        wb in -3.0f64..3.0,
        x in prop::collection::vec(0.05f64..2.0, 2),
        z2 in -0.99f64..2.0,
        lam in 0.0f64..4.0,
    ) {
        let k = cone(0.02);
        let model = LevyModel::new(vec![0.0, 0.0], vec![vec![0.0], vec![0.0]], vec![
            JumpAtom { z: vec![0.0, z2], lam },
            JumpAtom { z: vec![0.3, -0.5], lam: 0.8 },
        ]).unwrap();
        let f = LinearPowerField { p: vec![1.0, 1.0], rho: 0.3 };
        let g = QuadraticField::linear(vec![0.4, 1.1], 2.0);
        let combo = Combination { terms: vec![(wa, &f as &dyn ScalarField), (wb, &g)] };
        let i = |h: &dyn ScalarField| nonlocal_i_with_gradient(h, &x, &h.gradient(&x).unwrap(), &model, &k).unwrap();
        let (lhs, rhs) = (i(&combo), wa * i(&f) + wb * i(&g));
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())), "{} vs {}", lhs, rhs);
    }
}
