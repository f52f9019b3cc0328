//! Controlled portfolio simulation and Monte Carlo policy evaluation.
//!
//! `V_t = x + ∫ D_{V_{s-}} dY_s + B_t − C_t` with `Ḃ ∈ −K` (or impulses
//! `ΔB ∈ −K` at grid times), `Ċ = c e_1`. Ruin is the first time
//! `dist_to_boundary(V) <= RUIN_TOL`; all activity stops there. Each path
//! draws from its own counter-based stream, so estimates depend only on
//! `(seed, n_paths)`.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{check_dim, Error, Result};
use crate::grid::{AngularIndex, Grid};
use crate::levy::{exp_sample, next_arrivals, step_count, LevyModel};
use crate::linalg::{dot, norm, pairwise_sum};
use crate::operator::{ScalarField, UtilitySpec};
use crate::rng::path_rng;
use crate::solver::{NodeAction, ValueField};

/// `dist_to_boundary` at or below this counts as ruin.
pub const RUIN_TOL: f64 = 1e-9;
/// Tolerance of the cone constraints on policy outputs.
pub const POLICY_TOL: f64 = 1e-9;
/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489;

/// Controls chosen at one instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Action {
    /// Rate of cash consumption, `Ċ = c e_1`.
    pub consumption: f64,
    /// Trade rate `Ḃ ∈ −K`.
    pub trade_rate: Vec<f64>,
    /// Impulse `ΔB ∈ −K` applied before the step.
    pub impulse: Vec<f64>,
}

impl Action {
    pub fn zeroed(d: usize) -> Self {
        Self { consumption: 0.0, trade_rate: vec![0.0; d], impulse: vec![0.0; d] }
    }

    fn clear(&mut self) {
        self.consumption = 0.0;
        for (a, b) in self.trade_rate.iter_mut().zip(self.impulse.iter_mut()) {
            *a = 0.0;
            *b = 0.0;
        }
    }
}

/// A feedback rule `(t, V) -> action`. `out` arrives zeroed.
pub trait Policy: Sync {
    fn act(&self, t: f64, v: &[f64], out: &mut Action);
    fn name(&self) -> &str;
}

/// Checks the cone constraints of an action taken at `v`.
pub fn validate_action(cone: &ConeSpec, v: &[f64], a: &Action) -> Result<()> {
    if !(a.consumption >= -POLICY_TOL) || !a.consumption.is_finite() {
        return Err(Error::PolicyViolation(format!("consumption rate {} is not in R_+", a.consumption)));
    }
    let normals = cone.facet_normals();
    let check = |what: &str, b: &[f64]| {
        if b.iter().all(|x| *x == 0.0) {
            return Ok(());
        }
        // slack of −b
        let slack = normals.iter().map(|n| -dot(n, b)).fold(f64::INFINITY, f64::min);
        if slack < -POLICY_TOL * (1.0 + norm(b)) {
            return Err(Error::PolicyViolation(format!("{what} {b:?} is not in -K")));
        }
        Ok(())
    };
    check("trade rate", &a.trade_rate)?;
    check("impulse", &a.impulse)?;
    if a.impulse.iter().any(|x| *x != 0.0) {
        let after = normals
            .iter()
            .map(|n| n.iter().zip(v).zip(&a.impulse).map(|((ni, vi), bi)| ni * (vi + bi)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if after <= RUIN_TOL {
            return Err(Error::PolicyViolation(format!("impulse moves {v:?} out of int K")));
        }
    }
    Ok(())
}

/// Does nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&self, _: f64, _: &[f64], _: &mut Action) {}
    fn name(&self) -> &str {
        "zero"
    }
}

/// Consumes cash at a fixed rate and never trades.
#[derive(Debug, Clone, Copy)]
pub struct ConstantConsumption {
    pub rate: f64,
}

impl Policy for ConstantConsumption {
    fn act(&self, _: f64, _: &[f64], out: &mut Action) {
        out.consumption = self.rate;
    }
    fn name(&self) -> &str {
        "constant"
    }
}

/// Frictionless Merton quantities for cash plus one risky asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MertonParameters {
    /// Risky fraction of wealth.
    pub fraction: f64,
    /// Consumption per unit wealth.
    pub consumption_ratio: f64,
    /// `W(x) = scale (x1 + x2)^γ / γ`.
    pub scale: f64,
}

/// Requires a riskless first asset and no jumps.
pub fn merton_parameters(model: &LevyModel, utility: &UtilitySpec) -> Result<MertonParameters> {
    check_dim(2, model.dim())?;
    if model.xi[0].iter().any(|v| *v != 0.0) || model.total_intensity() > 0.0 {
        return Err(Error::Unsupported("Merton policy needs a riskless cash asset and no jumps".into()));
    }
    let s2 = model.a_matrix()[1][1];
    if s2 <= 0.0 {
        return Err(Error::Unsupported("Merton policy needs a volatile risky asset".into()));
    }
    let g = utility.gamma;
    let r = model.mu[0];
    let ex = model.mu[1] - r;
    let fraction = ex / (s2 * (1.0 - g));
    let consumption_ratio = (utility.beta - g * r - g * ex * ex / (2.0 * s2 * (1.0 - g))) / (1.0 - g);
    if consumption_ratio <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "beta",
            reason: format!("Merton problem is degenerate (consumption ratio {consumption_ratio})"),
        });
    }
    Ok(MertonParameters { fraction, consumption_ratio, scale: consumption_ratio.powf(g - 1.0) })
}

/// Consumes `consumption_ratio` times the paper wealth `x1 + x2` and trades
/// back to the Merton fraction whenever the risky fraction leaves
/// `[fraction − band, fraction + band]`.
#[derive(Debug, Clone)]
pub struct MertonPolicy {
    pub params: MertonParameters,
    pub band: f64,
    buy: [f64; 2],
    sell: [f64; 2],
}

impl MertonPolicy {
    pub fn new(params: MertonParameters, cone: &ConeSpec, band: f64) -> Result<Self> {
        check_dim(2, cone.dim())?;
        let pick = |want: usize| {
            cone.generators()
                .iter()
                .filter(|g| g[want] < 0.0)
                .max_by(|a, b| (-a[want]).total_cmp(&-b[want]))
                .map(|g| [g[0], g[1]])
                .ok_or_else(|| Error::Unsupported(format!("cone has no generator that increases asset {}", want + 1)))
        };
        Ok(Self { params, band, buy: pick(1)?, sell: pick(0)? })
    }
}

impl Policy for MertonPolicy {
    fn act(&self, _: f64, v: &[f64], out: &mut Action) {
        let w = v[0] + v[1];
        if w <= 0.0 {
            return;
        }
        let pi = self.params.fraction;
        let gap = pi * w - v[1];
        if (v[1] / w - pi).abs() > self.band {
            // move along −g until x2 = π (x1 + x2)
            let g = if gap > 0.0 { self.buy } else { self.sell };
            let denom = -g[1] + pi * (g[0] + g[1]);
            if denom != 0.0 {
                let delta = gap / denom;
                if delta > 0.0 {
                    out.impulse[0] = -delta * g[0];
                    out.impulse[1] = -delta * g[1];
                }
            }
        }
        let w_after = w + out.impulse[0] + out.impulse[1];
        out.consumption = self.params.consumption_ratio * w_after.max(0.0);
    }
    fn name(&self) -> &str {
        "merton"
    }
}

/// Feedback rule of a solved field: the action of the nearest node, with
/// consumption scaled homogeneously and trades applied as repeated impulses.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    grid: Grid,
    cone: ConeSpec,
    actions: Vec<NodeAction>,
    /// Consumption per unit `|x|_1` at each hold node.
    c_rel: Vec<f64>,
    /// Per angular index, the action shared by every radial level, if any.
    columns: Vec<Option<(NodeAction, f64)>>,
    angular: AngularIndex,
    generators: Vec<[f64; 2]>,
    trade_step: f64,
    pub max_impulses: usize,
}

/// Relative spread of `c_rel` tolerated within a uniform column.
const COLUMN_TOL: f64 = 1e-6;

impl GridPolicy {
    pub fn new(field: &ValueField) -> Self {
        let grid = &field.grid;
        let c_rel: Vec<f64> = grid
            .nodes
            .iter()
            .zip(&field.actions)
            .map(|(x, a)| match a {
                NodeAction::Hold { c } => c / (x[0].abs() + x[1].abs()),
                _ => 0.0,
            })
            .collect();
        let columns = (0..grid.n_angular())
            .map(|j| {
                let k0 = grid.index(0, j);
                let first = field.actions[k0];
                let same_kind = (0..grid.n_radial()).all(|i| {
                    let k = grid.index(i, j);
                    match (first, field.actions[k]) {
                        (NodeAction::Ruin, NodeAction::Ruin) => true,
                        (NodeAction::Trade { generator: a }, NodeAction::Trade { generator: b }) => a == b,
                        (NodeAction::Hold { .. }, NodeAction::Hold { .. }) => {
                            (c_rel[k] - c_rel[k0]).abs() <= COLUMN_TOL * c_rel[k0].abs()
                        }
                        _ => false,
                    }
                });
                same_kind.then_some((first, c_rel[k0]))
            })
            .collect();
        Self {
            grid: grid.clone(),
            cone: field.cone.clone(),
            actions: field.actions.clone(),
            c_rel,
            columns,
            angular: AngularIndex::new(grid),
            generators: field.generators.clone(),
            trade_step: field.trade_step,
            max_impulses: 64,
        }
    }

    /// Action at the node nearest to `y`.
    pub fn node_action(&self, y: &[f64; 2]) -> NodeAction {
        self.actions[self.grid.nearest(y)]
    }

    fn lookup(&self, y: &[f64; 2]) -> (NodeAction, f64) {
        let j = self.angular.nearest(y);
        if let Some(a) = self.columns[j] {
            return a;
        }
        let i = self.grid.radial_coordinate(y).round().clamp(0.0, (self.grid.n_radial() - 1) as f64) as usize;
        let k = self.grid.index(i, j);
        (self.actions[k], self.c_rel[k])
    }
}

impl Policy for GridPolicy {
    fn act(&self, _: f64, v: &[f64], out: &mut Action) {
        let mut y = [v[0], v[1]];
        if self.cone.min_facet_slack(&y) <= RUIN_TOL {
            return;
        }
        for _ in 0..self.max_impulses {
            match self.lookup(&y) {
                (NodeAction::Ruin, _) => return,
                (NodeAction::Hold { .. }, c_rel) => {
                    out.consumption = c_rel * (y[0].abs() + y[1].abs());
                    break;
                }
                (NodeAction::Trade { generator }, _) => {
                    let g = self.generators[generator];
                    let delta = self.trade_step * (y[0] * y[0] + y[1] * y[1]).sqrt() * self.grid.dtheta();
                    let next = [y[0] - delta * g[0], y[1] - delta * g[1]];
                    if self.cone.min_facet_slack(&next) <= RUIN_TOL {
                        break;
                    }
                    y = next;
                }
            }
        }
        out.impulse[0] = y[0] - v[0];
        out.impulse[1] = y[1] - v[1];
    }
    fn name(&self) -> &str {
        "grid"
    }
}

impl ScalarField for ValueField {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.value_at(&[x[0], x[1]])
    }
    fn sublinear_growth(&self) -> bool {
        self.gamma <= 1.0
    }
}

/// One step of the portfolio: `V + D_V dY_cont`, then each jump
/// `V^i ← V^i (1 + z^i)`, then the trade `ΔB` and the consumption `c dt e_1`.
pub fn step(v: &mut [f64], dy_cont: &[f64], jumps: &[&[f64]], delta_b: &[f64], consumed: f64) {
    for (vi, dy) in v.iter_mut().zip(dy_cont) {
        *vi += *vi * dy;
    }
    for z in jumps {
        for (vi, zi) in v.iter_mut().zip(z.iter()) {
            *vi *= 1.0 + zi;
        }
    }
    for (vi, b) in v.iter_mut().zip(delta_b) {
        *vi += b;
    }
    v[0] -= consumed;
}

/// First time of a recorded trajectory with `dist_to_boundary <= tol`;
/// `+∞` if none.
pub fn detect_ruin(trajectory: &[(f64, Vec<f64>)], cone: &ConeSpec, tol: f64) -> f64 {
    trajectory
        .iter()
        .find(|(_, v)| cone.min_facet_slack(v) <= tol)
        .map_or(f64::INFINITY, |(t, _)| *t)
}

/// Model, cone and utility of a simulation.
#[derive(Clone, Copy)]
pub struct Market<'a> {
    pub model: &'a LevyModel,
    pub cone: &'a ConeSpec,
    pub utility: &'a UtilitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// When a path stops before ruin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopRule {
    /// Deterministic time.
    Fixed(f64),
    /// First time `|V − x| >= radius`, capped at `max_time`.
    FirstExitBall { radius: f64, max_time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    pub path_id: u64,
    /// Ruin time, `+∞` when no ruin before the stop.
    pub theta: f64,
    /// Discounted utility accumulated up to `stop ∧ θ`.
    pub j: f64,
    /// Time at which simulation ended.
    pub stopped_at: f64,
    pub terminal: Vec<f64>,
    pub ruined_by_jump: bool,
    pub jumps: usize,
    /// `(t, V_t)` at every grid time, when recording was requested.
    #[serde(skip)]
    pub trajectory: Vec<(f64, Vec<f64>)>,
    /// `J_t` at the recorded times.
    #[serde(skip)]
    pub running_j: Vec<f64>,
}

/// Largest dimension handled by the path simulator.
pub const MAX_SIM_DIM: usize = 4;

type State = [f64; MAX_SIM_DIM];

fn padded(x: &[f64]) -> State {
    let mut v = [0.0; MAX_SIM_DIM];
    v[..x.len()].copy_from_slice(x);
    v
}

fn min_slack(normals: &[State], v: &State) -> f64 {
    let mut m = f64::INFINITY;
    for n in normals {
        let s = n[0] * v[0] + n[1] * v[1] + n[2] * v[2] + n[3] * v[3];
        if s < m {
            m = s;
        }
    }
    m
}

/// Simulates one controlled path from `x` until ruin, the stop rule or the
/// horizon, whichever is first.
#[allow(clippy::too_many_arguments)]
pub fn simulate_path(
    market: Market,
    policy: &dyn Policy,
    x: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
    path_id: u64,
    exit_radius: Option<f64>,
    record: bool,
) -> Result<PathOutcome> {
    let Market { model, cone, utility } = market;
    let d = model.dim();
    check_dim(d, x.len())?;
    check_dim(cone.dim(), d)?;
    if d > MAX_SIM_DIM {
        return Err(Error::Unsupported(format!("path simulation supports d <= {MAX_SIM_DIM}, got {d}")));
    }
    let (n, h) = step_count(horizon, dt)?;
    let m = model.factors();
    let comp = model.compensator();
    let drift = padded(&model.mu.iter().zip(&comp).map(|(a, b)| (a - b) * h).collect::<Vec<_>>());
    let xi: Vec<f64> = model.xi.iter().flatten().copied().collect();
    let normals: Vec<State> = cone.facet_normals().iter().map(|nv| padded(nv)).collect();
    let beta = utility.beta;
    let step_disc = (-beta * h).exp();
    let step_weight = (1.0 - step_disc) / beta;
    let sq = h.sqrt();
    let x0 = padded(x);

    let mut rng = path_rng(seed, path_id);
    let mut next = next_arrivals(model, 0.0, &mut rng);
    let mut next_jump = next.iter().copied().fold(f64::INFINITY, f64::min);
    let mut v = x0;
    let mut action = Action::zeroed(d);
    let mut dw = vec![0.0; m];
    let mut j = 0.0;
    let mut disc = 1.0;
    let mut jumps = 0;
    let mut trajectory = Vec::new();
    let mut running_j = Vec::new();
    // memoized utility of the last consumption rate
    let mut last_c = 0.0;
    let mut last_u = 0.0;
    let out = |theta: f64, j: f64, stopped_at: f64, v: &State, by_jump: bool, jumps: usize, trajectory, running_j| {
        PathOutcome {
            path_id,
            theta,
            j,
            stopped_at,
            terminal: v[..d].to_vec(),
            ruined_by_jump: by_jump,
            jumps,
            trajectory,
            running_j,
        }
    };
    if record {
        trajectory.push((0.0, x.to_vec()));
        running_j.push(0.0);
    }
    if min_slack(&normals, &v) <= RUIN_TOL {
        return Ok(out(0.0, 0.0, 0.0, &v, false, 0, trajectory, running_j));
    }
    for k in 0..n {
        let t = k as f64 * h;
        if let Some(r) = exit_radius {
            let dist: f64 = v.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist >= r {
                return Ok(out(f64::INFINITY, j, t, &v, false, jumps, trajectory, running_j));
            }
        }
        action.clear();
        policy.act(t, &v[..d], &mut action);
        validate_action(cone, &v[..d], &action)?;
        for (vi, b) in v.iter_mut().zip(&action.impulse) {
            *vi += b;
        }
        let s0 = min_slack(&normals, &v);
        for w in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = sq * z;
        }
        // continuous part first; jumps are then applied at their exact times
        for i in 0..d {
            let mut inc = drift[i];
            for (a, b) in xi[i * m..(i + 1) * m].iter().zip(&dw) {
                inc += a * b;
            }
            v[i] += v[i] * inc + action.trade_rate[i] * h;
        }
        v[0] -= action.consumption * h;
        if action.consumption != last_c {
            last_c = action.consumption;
            last_u = utility.utility(last_c);
        }
        let u = last_u;
        let s1 = min_slack(&normals, &v);
        let t1 = t + h;
        // earliest jump inside (t, t1]
        let mut ruin_jump: Option<f64> = None;
        while next_jump <= t1 {
            let Some((atom, &time)) = next.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) else { break };
            if time > t1 {
                next_jump = time;
                break;
            }
            next[atom] = time + exp_sample(model.jumps[atom].lam, &mut rng);
            if ruin_jump.is_some() || s1 <= RUIN_TOL {
                continue;
            }
            jumps += 1;
            for (vi, zi) in v.iter_mut().zip(&model.jumps[atom].z) {
                *vi *= 1.0 + zi;
            }
            if min_slack(&normals, &v) <= RUIN_TOL {
                ruin_jump = Some(time);
            }
        }
        if s1 <= RUIN_TOL {
            let frac = if s0 > s1 { (s0 / (s0 - s1)).clamp(0.0, 1.0) } else { 1.0 };
            let theta = t + frac * h;
            j += u * disc * (1.0 - (-beta * frac * h).exp()) / beta;
            if record {
                trajectory.push((theta, v[..d].to_vec()));
                running_j.push(j);
            }
            return Ok(out(theta, j, theta, &v, false, jumps, trajectory, running_j));
        }
        if let Some(theta) = ruin_jump {
            j += u * disc * (1.0 - (-beta * (theta - t)).exp()) / beta;
            if record {
                trajectory.push((theta, v[..d].to_vec()));
                running_j.push(j);
            }
            return Ok(out(theta, j, theta, &v, true, jumps, trajectory, running_j));
        }
        j += u * disc * step_weight;
        disc *= step_disc;
        if record {
            trajectory.push((t1, v[..d].to_vec()));
            running_j.push(j);
        }
    }
    Ok(out(f64::INFINITY, j, horizon, &v, false, jumps, trajectory, running_j))
}

/// Runs `opts.n_paths` independent paths in parallel; the result is in
/// path order and independent of the thread count.
pub fn simulate_paths(market: Market, policy: &dyn Policy, x: &[f64], opts: &SimOptions) -> Result<Vec<PathOutcome>> {
    market.model.validate()?;
    market.utility.validate()?;
    if market.cone.min_facet_slack(x) <= RUIN_TOL {
        log::warn!("initial position {x:?} is not in int K");
    }
    (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|i| simulate_path(market, policy, x, opts.horizon, opts.dt, opts.seed, i, None, false))
        .collect()
}

/// Mean and 99% confidence half-width of a sample.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let sd = (pairwise_sum(&sq) / (n - 1) as f64).sqrt();
    (mean, Z99 * sd / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    /// Estimate of `E J_{T ∧ θ}`.
    pub mean: f64,
    /// 99% half-width.
    pub ci: f64,
    pub n_paths: usize,
    pub ruined: usize,
    pub ruined_by_jump: usize,
    /// `e^{−βT} E[f(V_T); T < θ]` for the supplied dominating field `f`.
    pub tail_bound: Option<f64>,
}

/// Monte Carlo estimate of `E J_{T∧θ}` for a policy; a lower-bound
/// estimate of its infinite-horizon value since `U >= 0`.
pub fn evaluate_policy(
    market: Market,
    policy: &dyn Policy,
    x: &[f64],
    opts: &SimOptions,
    tail: Option<&dyn ScalarField>,
) -> Result<PolicyValue> {
    let paths = simulate_paths(market, policy, x, opts)?;
    Ok(summarize(&paths, market.utility.beta, opts.horizon, tail))
}

pub fn summarize(paths: &[PathOutcome], beta: f64, horizon: f64, tail: Option<&dyn ScalarField>) -> PolicyValue {
    let js: Vec<f64> = paths.iter().map(|p| p.j).collect();
    let (mean, ci) = mean_ci(&js);
    let tail_bound = tail.map(|f| {
        let vals: Vec<f64> = paths.iter().map(|p| if p.theta.is_finite() { 0.0 } else { f.value(&p.terminal) }).collect();
        (-beta * horizon).exp() * pairwise_sum(&vals) / vals.len().max(1) as f64
    });
    PolicyValue {
        mean,
        ci,
        n_paths: paths.len(),
        ruined: paths.iter().filter(|p| p.theta.is_finite()).count(),
        ruined_by_jump: paths.iter().filter(|p| p.ruined_by_jump).count(),
        tail_bound,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppEstimate {
    /// `E(J_τ + e^{−βτ} W(V_τ) 1_{τ<θ}) − W(x)`.
    pub residual: f64,
    pub ci: f64,
    pub w_x: f64,
}

/// Dynamic-programming residual of a policy against a value field.
pub fn dpp_residual(
    market: Market,
    w: &dyn ScalarField,
    x: &[f64],
    policy: &dyn Policy,
    rule: StopRule,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<DppEstimate> {
    let (horizon, radius) = match rule {
        StopRule::Fixed(t) => (t, None),
        StopRule::FirstExitBall { radius, max_time } => (max_time, Some(radius)),
    };
    let w_x = w.value(x);
    if horizon <= 0.0 {
        return Ok(DppEstimate { residual: 0.0, ci: 0.0, w_x });
    }
    let beta = market.utility.beta;
    let samples: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = simulate_path(market, policy, x, horizon, dt, seed, i, radius, false)?;
            let cont = if p.theta.is_finite() { 0.0 } else { (-beta * p.stopped_at).exp() * w.value(&p.terminal) };
            Ok(p.j + cont - w_x)
        })
        .collect::<Result<_>>()?;
    let (residual, ci) = mean_ci(&samples);
    Ok(DppEstimate { residual, ci, w_x })
}

/// Sample means and 99% half-widths of `e^{−βt} f(V_t) 1_{t<θ} + J_t` at
/// the given times (ascending, within the horizon).
pub fn supermartingale_profile(
    market: Market,
    f: &dyn ScalarField,
    policy: &dyn Policy,
    x: &[f64],
    times: &[f64],
    opts: &SimOptions,
) -> Result<Vec<(f64, f64, f64)>> {
    let beta = market.utility.beta;
    let (_, h) = step_count(opts.horizon, opts.dt)?;
    let per_path: Vec<Vec<f64>> = (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = simulate_path(market, policy, x, opts.horizon, opts.dt, opts.seed, i, None, true)?;
            // after ruin the process is frozen at its last recorded state
            Ok(times
                .iter()
                .map(|&t| {
                    let k = ((t / h).round() as usize).min(p.trajectory.len() - 1);
                    let (tk, v) = &p.trajectory[k];
                    let alive = !(p.theta.is_finite() && p.theta <= t);
                    p.running_j[k] + if alive { (-beta * tk).exp() * f.value(v) } else { 0.0 }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let col: Vec<f64> = per_path.iter().map(|r| r[k]).collect();
            let (m, ci) = mean_ci(&col);
            (t, m, ci)
        })
        .collect())
}

/// Writes `path_id,theta,J` rows (`inf` for no ruin).
pub fn write_results_csv<W: Write>(paths: &[PathOutcome], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "path_id,theta,J")?;
    for p in paths {
        writeln!(out, "{},{},{}", p.path_id, p.theta, p.j)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::CostMatrix;
    use crate::levy::JumpAtom;
    use approx::assert_relative_eq;

    fn flat(d: usize) -> LevyModel {
        LevyModel::new(vec![0.0; d], vec![vec![0.0]; d], vec![]).unwrap()
    }

    #[test]
    fn step_examples() {
        let mut v = vec![1.0, 1.0];
        step(&mut v, &[0.1 * 0.01, 0.0], &[], &[0.0, 0.0], 0.0);
        assert_relative_eq!(v[0], 1.001, epsilon = 1e-15);
        assert_eq!(v[1], 1.0);
        let mut v = vec![1.0, 2.0];
        step(&mut v, &[0.0, 0.0], &[&[0.0, -0.5]], &[0.0, 0.0], 0.0);
        assert_eq!(v, vec![1.0, 1.0]);
        let cone = ConeSpec::from_costs(&CostMatrix::uniform(2, 0.1).unwrap()).unwrap();
        let g = &cone.generators()[0];
        let mut v = vec![1.0, 1.0];
        let imp: Vec<f64> = g.iter().map(|x| -0.2 * x).collect();
        step(&mut v, &[0.0, 0.0], &[], &imp, 0.0);
        assert!(cone.contains(&v, 0.0).unwrap());
    }

    #[test]
    fn ruin_detection() {
        let orth = ConeSpec::orthant(2).unwrap();
        assert_eq!(detect_ruin(&[(0.0, vec![0.0, 1.0])], &orth, RUIN_TOL), 0.0);
        assert_eq!(detect_ruin(&[(0.0, vec![1.0, 1.0])], &orth, RUIN_TOL), f64::INFINITY);
        let m = flat(2);
        let u = UtilitySpec::new(0.5, 0.1).unwrap();
        let mk = Market { model: &m, cone: &orth, utility: &u };
        let p = simulate_path(mk, &ConstantConsumption { rate: 1.0 }, &[1.0, 1.0], 3.0, 0.01, 1, 0, None, true).unwrap();
        assert_relative_eq!(p.theta, 1.0, epsilon = 1e-9);
        assert_relative_eq!(detect_ruin(&p.trajectory, &orth, 1e-9), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn jump_ruin_on_friction_cone() {
        let cone = ConeSpec::from_costs(&CostMatrix::uniform(2, 0.1).unwrap()).unwrap();
        let m = LevyModel::new(vec![0.0, 0.0], vec![vec![0.0], vec![0.0]], vec![JumpAtom { z: vec![0.0, -0.99], lam: 5.0 }]).unwrap();
        let u = UtilitySpec::new(0.5, 0.1).unwrap();
        let mk = Market { model: &m, cone: &cone, utility: &u };
        // short cash, long stock: the crash leaves K
        let p = simulate_path(mk, &ZeroPolicy, &[-0.5, 1.0], 50.0, 0.01, 3, 0, None, false).unwrap();
        assert!(p.ruined_by_jump && p.theta.is_finite());
        // a long position with positive cash stays solvent through the crash
        let p2 = simulate_path(mk, &ZeroPolicy, &[0.001, 1.0], 50.0, 0.01, 3, 0, None, false).unwrap();
        assert!(p2.jumps > 0 && !p2.theta.is_finite());
    }

    #[test]
    fn zero_policy_earns_nothing() {
        let m = LevyModel::new(vec![0.0, 0.05], vec![vec![0.0], vec![0.3]], vec![]).unwrap();
        let c = ConeSpec::orthant(2).unwrap();
        let u = UtilitySpec::new(0.5, 0.1).unwrap();
        let opts = SimOptions { horizon: 1.0, dt: 0.01, n_paths: 50, seed: 9 };
        let r = evaluate_policy(Market { model: &m, cone: &c, utility: &u }, &ZeroPolicy, &[1.0, 1.0], &opts, None).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.ci, 0.0);
    }

    #[test]
    fn constant_consumption_closed_form() {
        let m = flat(2);
        let c = ConeSpec::orthant(2).unwrap();
        let u = UtilitySpec::new(0.5, 0.1).unwrap();
        let kappa = 0.5;
        let opts = SimOptions { horizon: 5.0, dt: 0.01, n_paths: 4, seed: 1 };
        let r = evaluate_policy(Market { model: &m, cone: &c, utility: &u }, &ConstantConsumption { rate: kappa }, &[1.0, 1.0], &opts, None)
            .unwrap();
        let exact = (kappa.powf(0.5) / 0.5) * (1.0 - (-0.1f64 * 1.0 / kappa).exp()) / 0.1;
        assert_relative_eq!(r.mean, exact, max_relative = 1e-9);
    }

    #[test]
    fn policy_violation_is_reported() {
        struct Bad;
        impl Policy for Bad {
            fn act(&self, _: f64, _: &[f64], out: &mut Action) {
                out.trade_rate[0] = 1.0;
            }
            fn name(&self) -> &str {
                "bad"
            }
        }
        let m = flat(2);
        let c = ConeSpec::orthant(2).unwrap();
        let u = UtilitySpec::new(0.5, 0.1).unwrap();
        let opts = SimOptions { horizon: 1.0, dt: 0.1, n_paths: 2, seed: 1 };
        let r = evaluate_policy(Market { model: &m, cone: &c, utility: &u }, &Bad, &[1.0, 1.0], &opts, None);
        assert!(matches!(r, Err(Error::PolicyViolation(_))));
    }

    #[test]
    fn merton_parameters_values() {
        let m = LevyModel::new(vec![0.0, 0.07], vec![vec![0.0], vec![0.3]], vec![]).unwrap();
        let u = UtilitySpec::new(0.3, 0.2).unwrap();
        let p = merton_parameters(&m, &u).unwrap();
        assert_relative_eq!(p.fraction, 0.07 / (0.09 * 0.7), epsilon = 1e-12);
        assert!(p.consumption_ratio > 0.0);
    }

    #[test]
    fn results_csv_and_determinism() {
        let m = LevyModel::new(vec![0.0, 0.07], vec![vec![0.0], vec![0.3]], vec![]).unwrap();
        let c = ConeSpec::from_costs(&CostMatrix::uniform(2, 0.01).unwrap()).unwrap();
        let u = UtilitySpec::new(0.3, 0.2).unwrap();
        let pol = MertonPolicy::new(merton_parameters(&m, &u).unwrap(), &c, 0.05).unwrap();
        let opts = SimOptions { horizon: 2.0, dt: 0.01, n_paths: 20, seed: 4 };
        let mk = Market { model: &m, cone: &c, utility: &u };
        let a = simulate_paths(mk, &pol, &[0.5, 0.5], &opts).unwrap();
        let b = simulate_paths(mk, &pol, &[0.5, 0.5], &opts).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_results_csv(&a, &mut ba).unwrap();
        write_results_csv(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        assert!(String::from_utf8(ba).unwrap().starts_with("path_id,theta,J\n"));
    }
}
