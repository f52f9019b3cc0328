#![allow(dead_code)]

use conehjb::cone::{ConeSpec, CostMatrix};
use conehjb::grid::{Grid, GridSpec};
use conehjb::levy::{JumpAtom, LevyModel};
use conehjb::lyapunov::{supersolution_scale, verification_nodes, verify_lyapunov, LyapunovCertificate};
use conehjb::solver::{solve, Problem, SolverOptions, ValueField};
use conehjb::UtilitySpec;

pub const GAMMA: f64 = 0.3;
pub const BETA: f64 = 0.2;
pub const MU: [f64; 2] = [0.0, 0.07];
pub const SIGMA: f64 = 0.3;

pub struct Setup {
    pub model: LevyModel,
    pub cone: ConeSpec,
    pub utility: UtilitySpec,
}

impl Setup {
    pub fn problem(&self) -> Problem<'_> {
        Problem { model: &self.model, cone: &self.cone, utility: &self.utility }
    }

    pub fn market(&self) -> conehjb::sim::Market<'_> {
        conehjb::sim::Market { model: &self.model, cone: &self.cone, utility: &self.utility }
    }

    pub fn solve(&self, n_r: usize, n_a: usize, dt: f64, cert: Option<&LyapunovCertificate>) -> ValueField {
        let grid = Grid::new(&self.cone, &GridSpec::new(1.0, n_r, n_a)).unwrap();
        solve(&self.problem(), &grid, cert, &SolverOptions { dt, ..Default::default() }).unwrap()
    }
}

pub fn two_asset(cost: f64, jumps: Vec<JumpAtom>) -> Setup {
    Setup {
        model: LevyModel::new(MU.to_vec(), vec![vec![0.0], vec![SIGMA]], jumps).unwrap(),
        cone: ConeSpec::from_costs(&CostMatrix::uniform(2, cost).unwrap()).unwrap(),
        utility: UtilitySpec::new(GAMMA, BETA).unwrap(),
    }
}

/// Nearly frictionless, no jumps.
pub fn merton() -> Setup {
    two_asset(1e-8, vec![])
}

/// Two symmetric jumps of the risky asset.
pub fn jumps(cost: f64) -> Setup {
    two_asset(
        cost,
        vec![JumpAtom { z: vec![0.0, -0.3], lam: 0.5 }, JumpAtom { z: vec![0.0, 0.3], lam: 0.5 }],
    )
}

/// Certificate for `f_p`, `p = (1, 1)`, `ρ = γ`, verified and scaled.
pub fn certificate(s: &Setup) -> LyapunovCertificate {
    let mut cert = LyapunovCertificate::compute(&s.model, &s.cone, &[1.0, 1.0], GAMMA).unwrap();
    let nodes = verification_nodes(&s.cone, 1.0, 12, 40).unwrap();
    let report = verify_lyapunov(&mut cert, &s.model, &s.cone, s.utility.beta, &nodes).unwrap();
    assert!(report.passed, "{report:?}");
    supersolution_scale(&mut cert, &s.model, &s.cone, &s.utility, &nodes).unwrap();
    cert
}

/// Frictionless Merton value `A (x1 + x2)^γ / γ`, derived independently
/// from the scalar HJB `sup_π,c { U(c) − c u' + π μ w u' + ½ π² σ² w² u'' } = β u`.
pub fn merton_value(x: &[f64]) -> f64 {
    let g = GAMMA;
    let mu = MU[1];
    let s2 = SIGMA * SIGMA;
    // with u = A w^γ/γ the optimal fraction is μ/(σ²(1−γ)) and c = A^{1/(γ−1)} w
    let nu = (BETA - g * mu * mu / (2.0 * s2 * (1.0 - g))) / (1.0 - g);
    let a = nu.powf(g - 1.0);
    let w = x[0] + x[1];
    if w <= 0.0 {
        0.0
    } else {
        a * w.powf(g) / g
    }
}
