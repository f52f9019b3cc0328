mod common;

use common::{certificate, jumps, merton, GAMMA};
use conehjb::grid::NodeTag;
use conehjb::ScalarField;

#[test]
fn solved_field_is_nonnegative_zero_on_boundary_and_monotone() {
    for s in [merton(), jumps(0.05)] {
        let field = s.solve(60, 41, 0.05, None);
        assert!(field.diagnostics.converged);
        for (k, w) in field.values.iter().enumerate() {
            assert!(*w >= 0.0);
            if field.grid.tags[k] == NodeTag::ConeBoundary {
                assert_eq!(*w, 0.0);
            }
        }
        let bad = field.monotonicity_violations(1e-6);
        assert!(bad.is_empty(), "{} violations, first {:?}", bad.len(), bad.first());
    }
}

#[test]
fn certified_bound_dominates_the_field() {
    let s = merton();
    let cert = certificate(&s);
    let field = s.solve(80, 41, 0.05, Some(&cert));
    let f = cert.field();
    let a = cert.scale.unwrap();
    for (x, w) in field.grid.nodes.iter().zip(&field.values) {
        assert!(*w <= a * f.value(x) + 1e-8, "{w} > {} at {x:?}", a * f.value(x));
    }
}

#[test]
fn vanishing_jump_intensity_recovers_the_diffusion_field() {
    let base = common::two_asset(0.05, vec![]);
    let with = jumps(0.05);
    let reference = base.solve(40, 21, 0.05, None);
    for factor in [0.0, 1e-12] {
        let s = common::Setup { model: with.model.with_scaled_intensities(factor), cone: with.cone.clone(), utility: with.utility.clone() };
        let field = s.solve(40, 21, 0.05, None);
        let diff = field.values.iter().zip(&reference.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 2.0 * 1e-8, "factor {factor}: diff {diff}");
    }
}

#[test]
fn field_is_homogeneous_on_nested_nodes() {
    let s = jumps(0.05);
    let field = s.solve(60, 41, 0.05, None);
    let k = field.grid.spec.levels_per_doubling;
    let mut worst: f64 = 0.0;
    for i in 0..field.grid.n_radial() - k {
        for j in 0..field.grid.n_angular() {
            let (lo, hi) = (field.values[field.grid.index(i, j)], field.values[field.grid.index(i + k, j)]);
            if lo > 0.0 {
                worst = worst.max((hi - 2f64.powf(GAMMA) * lo).abs() / hi);
            }
        }
    }
    assert!(worst <= 1e-2, "{worst}");
}
