//! Monotone solver for the HJB variational inequality on a planar cone.
//!
//! The discrete operator at an interior node `x` is
//!
//! ```text
//! W(x) = max{ max_c [ U(c)(1 − e^{−βΔt})/β + e^{−βΔt} E W(X^c_Δt) ],
//!             max_k W(x − δ g_k) }
//! ```
//!
//! where `X^c_Δt` is a one-step semi-Lagrangian approximation of the
//! controlled jump-diffusion (2m symmetric diffusion points, one point per
//! jump atom) and `δ = trade_step · |x| Δθ`. Off-node values come from the
//! ratio interpolation of [`crate::grid`], points outside `int K` count as
//! ruin (value 0). Every coefficient is nonnegative, so the scheme is
//! monotone. The fixed point is found by modified policy iteration started
//! from `W = 0`, with Gauss–Seidel policy evaluation.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec, NodeTag, RatioInterpolator, Stencil};
use crate::levy::LevyModel;
use crate::lyapunov::LyapunovCertificate;
use crate::operator::{ScalarField, UtilitySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Pseudo-time step of the semi-Lagrangian hold branch.
    pub dt: f64,
    /// Stop when the Bellman residual (sup norm) falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Cap on Gauss–Seidel sweeps per policy evaluation.
    pub max_sweeps: usize,
    /// Trade step as a multiple of `|x| Δθ`.
    pub trade_step: f64,
    /// Allowed drop `W(x − δ g_k) − W(x)` after convergence.
    pub monotonicity_tol: f64,
    /// Cap extrapolated values by the certificate bound `a f_p`.
    pub cap: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            dt: 0.01,
            tol: 1e-8,
            max_iter: 500,
            max_sweeps: 200_000,
            trade_step: 1.0,
            monotonicity_tol: 1e-6,
            cap: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, reason: format!("{v} must be > 0") })
            }
        };
        pos("dt", self.dt)?;
        pos("tol", self.tol)?;
        pos("trade_step", self.trade_step)?;
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter { name: "max_iter", reason: "must be >= 1".into() });
        }
        Ok(())
    }
}

/// Action of the discrete policy at a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NodeAction {
    /// Node on `∂K`: nothing to control.
    Ruin,
    /// Consume cash at rate `c` and hold.
    Hold { c: f64 },
    /// Trade along `−g_k`.
    Trade { generator: usize },
}

impl NodeAction {
    pub fn branch_name(&self) -> &'static str {
        match self {
            NodeAction::Ruin => "boundary",
            NodeAction::Hold { .. } => "hold",
            NodeAction::Trade { .. } => "trade",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub sweeps: usize,
    pub residual_history: Vec<f64>,
    pub final_residual: f64,
    pub converged: bool,
    /// Set when stalled policy iteration switched to value iteration.
    pub fallback: bool,
    /// `(node, atom)` pairs where a jump lands on `∂K`.
    pub boundary_hits: Vec<(usize, usize)>,
    /// Largest `W − a f_p` over nodes when a certificate bound is known.
    pub max_bound_excess: Option<f64>,
    pub elapsed_secs: f64,
}

/// Solved value function with its feedback policy.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub grid: Grid,
    pub cone: ConeSpec,
    pub interp: RatioInterpolator,
    pub values: Vec<f64>,
    pub actions: Vec<NodeAction>,
    pub generators: Vec<[f64; 2]>,
    pub trade_step: f64,
    pub dt: f64,
    pub gamma: f64,
    pub beta: f64,
    pub diagnostics: SolveDiagnostics,
}

impl ValueField {
    /// Interpolated `W(y)`, zero outside `int K`.
    pub fn value_at(&self, y: &[f64; 2]) -> f64 {
        self.interp.eval(&self.grid, &self.cone, &self.values, y)
    }

    /// Rebuilds a field from stored node values and actions, such as the
    /// rows of a `field.csv`. `q` is the interpolation direction.
    pub fn from_parts(
        problem: &Problem,
        grid: &Grid,
        q: [f64; 2],
        values: Vec<f64>,
        actions: Vec<NodeAction>,
        opts: &SolverOptions,
    ) -> Result<Self> {
        crate::error::check_dim(grid.len(), values.len())?;
        crate::error::check_dim(grid.len(), actions.len())?;
        Ok(Self {
            grid: grid.clone(),
            cone: problem.cone.clone(),
            interp: RatioInterpolator::new(grid, q, problem.utility.gamma)?,
            values,
            actions,
            generators: problem.cone.generators().iter().map(|g| [g[0], g[1]]).collect(),
            trade_step: opts.trade_step,
            dt: opts.dt,
            gamma: problem.utility.gamma,
            beta: problem.utility.beta,
            diagnostics: SolveDiagnostics {
                iterations: 0,
                sweeps: 0,
                residual_history: vec![],
                final_residual: 0.0,
                converged: false,
                fallback: false,
                boundary_hits: vec![],
                max_bound_excess: None,
                elapsed_secs: 0.0,
            },
        })
    }

    /// Trade impulse length at `x`.
    pub fn trade_delta(&self, x: &[f64; 2]) -> f64 {
        self.trade_step * (x[0] * x[0] + x[1] * x[1]).sqrt() * self.grid.dtheta()
    }

    /// Writes `x1,x2,W,branch,c_star,trade_gen` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "x1,x2,W,branch,c_star,trade_gen")?;
        for ((x, w), a) in self.grid.nodes.iter().zip(&self.values).zip(&self.actions) {
            let (c, g) = match a {
                NodeAction::Hold { c } => (c.to_string(), String::new()),
                NodeAction::Trade { generator } => (String::new(), generator.to_string()),
                NodeAction::Ruin => (String::new(), String::new()),
            };
            writeln!(out, "{},{},{},{},{},{}", x[0], x[1], w, a.branch_name(), c, g)?;
        }
        Ok(())
    }

    /// Nodes at which the scheme's monotonicity `W(x) >= W(x − δ g_k)` fails
    /// by more than `tol`, as `(node, generator, drop)`.
    pub fn monotonicity_violations(&self, tol: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (k, x) in self.grid.nodes.iter().enumerate() {
            if self.grid.tags[k] == NodeTag::ConeBoundary {
                continue;
            }
            let delta = self.trade_delta(x);
            for (gi, g) in self.generators.iter().enumerate() {
                let y = [x[0] - delta * g[0], x[1] - delta * g[1]];
                let drop = self.value_at(&y) - self.values[k];
                if drop > tol * (1.0 + self.values[k].abs()) {
                    out.push((k, gi, drop));
                }
            }
        }
        out
    }
}

/// Policy iterations without halving the best residual before falling back
/// to value iteration.
const STALL_WINDOW: usize = 10;

/// Everything the scheme needs besides the grid.
pub struct Problem<'a> {
    pub model: &'a LevyModel,
    pub cone: &'a ConeSpec,
    pub utility: &'a UtilitySpec,
}

struct Scheme<'a> {
    grid: &'a Grid,
    cone: &'a ConeSpec,
    interp: &'a RatioInterpolator,
    utility: &'a UtilitySpec,
    xi: Vec<[f64; 2]>,
    drift: [f64; 2],
    jumps: Vec<([f64; 2], f64)>,
    p_jump: f64,
    disc: f64,
    util_weight: f64,
    dt: f64,
    generators: Vec<[f64; 2]>,
    trade_step: f64,
    cap: Option<(crate::lyapunov::LinearPowerField, f64)>,
}

/// One row of the policy's linear system: `W_k = reward + Σ coef W_col`.
#[derive(Debug, Clone, Default)]
struct Row {
    reward: f64,
    entries: Vec<(u32, f64)>,
}

impl Row {
    fn add(&mut self, s: &Stencil, scale: f64) {
        for (i, w) in s.entries() {
            self.entries.push((i as u32, scale * w));
        }
    }
}

impl Scheme<'_> {
    /// Linear-or-constant value at a point: stencil plus capped constant.
    fn point(&self, y: &[f64; 2], values: &[f64]) -> (Option<Stencil>, f64) {
        let Some(s) = self.interp.stencil(self.grid, self.cone, y) else {
            return (None, 0.0);
        };
        if let Some((f, a)) = &self.cap {
            let r = self.grid.radial_coordinate(y);
            if r > (self.grid.n_radial() - 1) as f64 {
                let bound = a * f.value(y);
                if s.apply(values) > bound {
                    return (None, bound);
                }
            }
        }
        (Some(s), 0.0)
    }

    fn point_value(&self, y: &[f64; 2], values: &[f64]) -> f64 {
        match self.point(y, values) {
            (Some(s), _) => s.apply(values),
            (None, v) => v,
        }
    }

    /// Diffusion points of the hold branch at consumption `c`, each with
    /// probability weight.
    fn diffusion_points(&self, x: &[f64; 2], c: f64) -> ([[f64; 2]; 8], usize) {
        let base = [
            x[0] + (self.drift[0] * x[0] - c) * self.dt,
            x[1] + self.drift[1] * x[1] * self.dt,
        ];
        let mut pts = [[0.0; 2]; 8];
        if self.xi.is_empty() {
            pts[0] = base;
            return (pts, 1);
        }
        let m = self.xi.len();
        let s = (m as f64 * self.dt).sqrt();
        for (k, col) in self.xi.iter().enumerate() {
            let d = [s * col[0] * x[0], s * col[1] * x[1]];
            pts[2 * k] = [base[0] + d[0], base[1] + d[1]];
            pts[2 * k + 1] = [base[0] - d[0], base[1] - d[1]];
        }
        (pts, 2 * m)
    }

    fn hold_objective(&self, x: &[f64; 2], c: f64, values: &[f64]) -> f64 {
        let (pts, n) = self.diffusion_points(x, c);
        let w = self.disc * (1.0 - self.p_jump) / n as f64;
        let cont: f64 = pts[..n].iter().map(|y| self.point_value(y, values)).sum();
        self.util_weight * self.utility.utility(c) + w * cont
    }

    fn jump_part(&self, x: &[f64; 2], values: &[f64]) -> f64 {
        self.jumps
            .iter()
            .map(|(z, p)| {
                let y = [x[0] * (1.0 + z[0]), x[1] * (1.0 + z[1])];
                self.disc * p * self.point_value(&y, values)
            })
            .sum()
    }

    /// Best consumption rate at `x`: golden section in `ln c` around the
    /// first-order guess, compared against `c = 0`.
    fn best_consumption(&self, x: &[f64; 2], values: &[f64]) -> (f64, f64) {
        let scale = x[0].abs() + x[1].abs();
        let h = 1e-3 * scale;
        let slope = (self.point_value(&[x[0] + h, x[1]], values) - self.point_value(&[x[0] - h, x[1]], values)) / (2.0 * h);
        let g = self.utility.gamma;
        let guess = if slope > 0.0 && slope.is_finite() {
            slope.powf(1.0 / (g - 1.0)).min(1e3 * scale).max(1e-8 * scale)
        } else {
            0.1 * scale
        };
        let f = |lc: f64| self.hold_objective(x, lc.exp(), values);
        let (mut lo, mut hi) = (guess.ln() - 3.0, guess.ln() + 3.0);
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let (mut m1, mut m2) = (hi - r * (hi - lo), lo + r * (hi - lo));
        let (mut f1, mut f2) = (f(m1), f(m2));
        while hi - lo > 1e-6 {
            if f1 < f2 {
                lo = m1;
                m1 = m2;
                f1 = f2;
                m2 = lo + r * (hi - lo);
                f2 = f(m2);
            } else {
                hi = m2;
                m2 = m1;
                f2 = f1;
                m1 = hi - r * (hi - lo);
                f1 = f(m1);
            }
        }
        let (c, v) = if f1 >= f2 { (m1.exp(), f1) } else { (m2.exp(), f2) };
        let v0 = self.hold_objective(x, 0.0, values);
        if v0 >= v {
            (0.0, v0)
        } else {
            (c, v)
        }
    }

    fn trade_point(&self, x: &[f64; 2], k: usize) -> [f64; 2] {
        let delta = self.trade_step * (x[0] * x[0] + x[1] * x[1]).sqrt() * self.grid.dtheta();
        let g = self.generators[k];
        [x[0] - delta * g[0], x[1] - delta * g[1]]
    }

    /// Bellman update at node `k`: new value, action and policy row.
    fn improve(&self, k: usize, values: &[f64]) -> (f64, NodeAction, Row) {
        let x = &self.grid.nodes[k];
        let (c, hold_cont) = self.best_consumption(x, values);
        let hold = hold_cont + self.jump_part(x, values);
        let mut best = (hold, NodeAction::Hold { c });
        for gk in 0..self.generators.len() {
            let v = self.point_value(&self.trade_point(x, gk), values);
            if v > best.0 {
                best = (v, NodeAction::Trade { generator: gk });
            }
        }
        let row = self.row(x, best.1, values);
        (best.0, best.1, row)
    }

    fn row(&self, x: &[f64; 2], action: NodeAction, values: &[f64]) -> Row {
        let mut row = Row::default();
        let add_point = |row: &mut Row, y: &[f64; 2], w: f64| match self.point(y, values) {
            (Some(s), _) => row.add(&s, w),
            (None, v) => row.reward += w * v,
        };
        match action {
            NodeAction::Ruin => {}
            NodeAction::Hold { c } => {
                row.reward += self.util_weight * self.utility.utility(c);
                let (pts, n) = self.diffusion_points(x, c);
                let w = self.disc * (1.0 - self.p_jump) / n as f64;
                for y in &pts[..n] {
                    add_point(&mut row, y, w);
                }
                for (z, p) in &self.jumps {
                    let y = [x[0] * (1.0 + z[0]), x[1] * (1.0 + z[1])];
                    add_point(&mut row, &y, self.disc * p);
                }
            }
            NodeAction::Trade { generator } => add_point(&mut row, &self.trade_point(x, generator), 1.0),
        }
        row
    }
}

/// Symmetric Gauss–Seidel sweep; returns the largest update.
fn sweep(rows: &[Row], values: &mut [f64], active: &[usize], backward: bool) -> f64 {
    let mut change = 0.0f64;
    let mut visit = |k: usize| {
        let row = &rows[k];
        let mut acc = row.reward;
        let mut selfw = 0.0;
        for &(col, w) in &row.entries {
            if col as usize == k {
                selfw += w;
            } else {
                acc += w * values[col as usize];
            }
        }
        if selfw < 1.0 {
            let v = acc / (1.0 - selfw);
            change = change.max((v - values[k]).abs());
            values[k] = v;
        }
    };
    if backward {
        active.iter().rev().for_each(|&k| visit(k));
    } else {
        active.iter().for_each(|&k| visit(k));
    }
    change
}

/// Solves the discrete HJB equation on `grid`. A certificate with a scale
/// enables the far-field cap and the dominance diagnostic.
pub fn solve(
    problem: &Problem,
    grid: &Grid,
    cert: Option<&LyapunovCertificate>,
    opts: &SolverOptions,
) -> Result<ValueField> {
    let start = Instant::now();
    let Problem { model, cone, utility } = *problem;
    opts.validate()?;
    utility.validate()?;
    model.validate()?;
    if cone.dim() != 2 {
        return Err(Error::UnsupportedDimension(cone.dim()));
    }
    crate::error::check_dim(2, model.dim())?;

    let q = match cert {
        Some(c) => c.p.clone(),
        None => cone.dual_interior_direction(),
    };
    let interp = RatioInterpolator::new(grid, [q[0], q[1]], utility.gamma)?;
    let comp = model.compensator();
    let lambda = model.total_intensity();
    let p_jump = 1.0 - (-lambda * opts.dt).exp();
    let beta = utility.beta;
    let generators: Vec<[f64; 2]> = cone.generators().iter().map(|g| [g[0], g[1]]).collect();
    let cap = if opts.cap {
        cert.and_then(|c| c.scale.map(|a| (c.field(), a)))
    } else {
        None
    };
    let scheme = Scheme {
        grid,
        cone,
        interp: &interp,
        utility,
        xi: (0..model.factors()).map(|k| [model.xi[0][k], model.xi[1][k]]).collect(),
        drift: [model.mu[0] - comp[0], model.mu[1] - comp[1]],
        jumps: model
            .active_jumps()
            .map(|(_, a)| ([a.z[0], a.z[1]], p_jump * a.lam / lambda))
            .collect(),
        p_jump,
        disc: (-beta * opts.dt).exp(),
        util_weight: (1.0 - (-beta * opts.dt).exp()) / beta,
        dt: opts.dt,
        generators: generators.clone(),
        trade_step: opts.trade_step,
        cap,
    };

    let points: Vec<Vec<f64>> = grid
        .nodes
        .iter()
        .zip(&grid.tags)
        .filter(|(_, t)| **t != NodeTag::ConeBoundary)
        .map(|(x, _)| x.to_vec())
        .collect();
    let boundary_hits = model.boundary_hits(cone, &points, 1e-12);

    let n = grid.len();
    let active: Vec<usize> = (0..n).filter(|&k| grid.tags[k] != NodeTag::ConeBoundary).collect();
    let mut values = vec![0.0; n];
    let mut actions: Vec<NodeAction> =
        (0..n).map(|k| if grid.tags[k] == NodeTag::ConeBoundary { NodeAction::Ruin } else { NodeAction::Hold { c: 0.0 } }).collect();
    let mut rows: Vec<Row> = vec![Row::default(); n];
    let mut history = Vec::new();
    let mut sweeps = 0usize;
    let mut fallback = false;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let updates: Vec<(usize, f64, NodeAction, Row)> = active
            .par_iter()
            .map(|&k| {
                let (v, a, r) = scheme.improve(k, &values);
                (k, v, a, r)
            })
            .collect();
        let mut residual = 0.0f64;
        for (k, v, a, r) in updates {
            residual = residual.max((v - values[k]).abs());
            values[k] = v;
            actions[k] = a;
            rows[k] = r;
        }
        history.push(residual);
        log::debug!("policy iteration {iterations}: residual {residual:e}");
        if residual < opts.tol {
            converged = true;
            break;
        }
        if !fallback && history.len() >= 2 * STALL_WINDOW {
            let (before, recent) = history.split_at(history.len() - STALL_WINDOW);
            let best = |h: &[f64]| h.iter().copied().fold(f64::INFINITY, f64::min);
            if best(recent) > 0.5 * best(before) {
                log::warn!("policy iteration stalls; switching to value iteration");
                fallback = true;
            }
        }
        let target = if fallback { f64::INFINITY } else { (1e-3 * residual).max(0.1 * opts.tol) };
        let mut backward = false;
        loop {
            if sweeps >= opts.max_sweeps {
                break;
            }
            let ch = sweep(&rows, &mut values, &active, backward);
            backward = !backward;
            sweeps += 1;
            if ch < target || fallback {
                break;
            }
        }
        if sweeps >= opts.max_sweeps {
            break;
        }
    }
    let final_residual = history.last().copied().unwrap_or(0.0);
    if !converged {
        return Err(Error::NotConverged { iterations, residual: final_residual });
    }
    let max_bound_excess = cert.and_then(|c| {
        c.scale.map(|a| {
            let f = c.field();
            active
                .iter()
                .map(|&k| values[k] - a * f.value(&grid.nodes[k]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
    });
    let field = ValueField {
        grid: grid.clone(),
        cone: cone.clone(),
        interp,
        values,
        actions,
        generators,
        trade_step: opts.trade_step,
        dt: opts.dt,
        gamma: utility.gamma,
        beta,
        diagnostics: SolveDiagnostics {
            iterations,
            sweeps,
            residual_history: history,
            final_residual,
            converged,
            fallback,
            boundary_hits,
            max_bound_excess,
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
    };
    if let Some((node, generator, drop)) =
        field.monotonicity_violations(opts.monotonicity_tol).into_iter().max_by(|a, b| a.2.total_cmp(&b.2))
    {
        return Err(Error::MonotonicityBreach { node, generator, drop });
    }
    Ok(field)
}

/// Feedback rule read off a solved field at one node.
pub fn extract_policy(field: &ValueField) -> crate::sim::GridPolicy {
    crate::sim::GridPolicy::new(field)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineLevel {
    pub spec: GridSpec,
    pub dt: f64,
    pub nodes: usize,
    pub iterations: usize,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub levels: Vec<RefineLevel>,
    /// Sup-norm difference between successive levels on the coarsest nodes.
    pub differences: Vec<f64>,
    /// `differences[k] / differences[k + 1]`.
    pub ratios: Vec<f64>,
    /// `log2` of the ratios.
    pub orders: Vec<f64>,
    pub passed: bool,
}

/// Solves on `levels` successively halved meshes (and halved `dt`) and
/// compares the fields on the nodes of the coarsest mesh.
pub fn refine_study(
    problem: &Problem,
    base: &GridSpec,
    cert: Option<&LyapunovCertificate>,
    opts: &SolverOptions,
    levels: usize,
) -> Result<RefineReport> {
    let mut specs = vec![base.clone()];
    for _ in 1..levels {
        let next = specs.last().expect("nonempty").refined();
        specs.push(next);
    }
    if levels < 2 {
        return Ok(RefineReport { levels: vec![], differences: vec![], ratios: vec![], orders: vec![], passed: true });
    }
    let mut fields = Vec::with_capacity(levels);
    let mut summary = Vec::with_capacity(levels);
    let mut o = opts.clone();
    for spec in &specs {
        let grid = Grid::new(problem.cone, spec)?;
        let f = solve(problem, &grid, cert, &o)?;
        summary.push(RefineLevel {
            spec: spec.clone(),
            dt: o.dt,
            nodes: grid.len(),
            iterations: f.diagnostics.iterations,
            elapsed_secs: f.diagnostics.elapsed_secs,
        });
        fields.push(f);
        o.dt *= 0.5;
    }
    let coarse = &fields[0].grid;
    let sample = |f: &ValueField, level: usize| -> Vec<f64> {
        let s = 1usize << level;
        (0..coarse.len())
            .map(|k| {
                let (i, j) = coarse.ij(k);
                f.values[f.grid.index(i * s, j * s)]
            })
            .collect()
    };
    let sampled: Vec<Vec<f64>> = fields.iter().enumerate().map(|(l, f)| sample(f, l)).collect();
    let differences: Vec<f64> = sampled
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    let ratios: Vec<f64> = differences.windows(2).map(|w| w[0] / w[1]).collect();
    let orders = ratios.iter().map(|r| r.log2()).collect();
    let passed = ratios.iter().all(|r| *r >= 1.5);
    Ok(RefineReport { levels: summary, differences, ratios, orders, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::CostMatrix;
    use crate::grid::build_grid;

    fn setup(cost: f64) -> (LevyModel, ConeSpec, UtilitySpec) {
        (
            LevyModel::new(vec![0.0, 0.07], vec![vec![0.0], vec![0.3]], vec![]).unwrap(),
            ConeSpec::from_costs(&CostMatrix::uniform(2, cost).unwrap()).unwrap(),
            UtilitySpec::new(0.3, 0.2).unwrap(),
        )
    }

    #[test]
    fn small_solve_has_zero_boundary_and_positive_interior() {
        let (m, c, u) = setup(0.05);
        let g = build_grid(&c, 1.0, 3, 21).unwrap();
        let opts = SolverOptions { dt: 0.05, tol: 1e-7, ..Default::default() };
        let f = solve(&Problem { model: &m, cone: &c, utility: &u }, &g, None, &opts).unwrap();
        for (k, t) in g.tags.iter().enumerate() {
            if *t == NodeTag::ConeBoundary {
                assert_eq!(f.values[k], 0.0);
                assert_eq!(f.actions[k], NodeAction::Ruin);
            } else {
                assert!(f.values[k] > 0.0);
            }
        }
        assert!(f.diagnostics.converged);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,W,branch,c_star,trade_gen\n"));
        assert_eq!(text.lines().count(), g.len() + 1);
    }

    #[test]
    fn not_converged_is_reported() {
        let (m, c, u) = setup(0.05);
        let g = build_grid(&c, 1.0, 3, 11).unwrap();
        let opts = SolverOptions { dt: 0.05, max_iter: 1, ..Default::default() };
        let r = solve(&Problem { model: &m, cone: &c, utility: &u }, &g, None, &opts);
        assert!(matches!(r, Err(Error::NotConverged { iterations: 1, .. })));
    }

    #[test]
    fn single_level_refinement_is_empty() {
        let (m, c, u) = setup(0.05);
        let r = refine_study(
            &Problem { model: &m, cone: &c, utility: &u },
            &GridSpec::new(1.0, 1, 5),
            None,
            &SolverOptions::default(),
            1,
        )
        .unwrap();
        assert!(r.differences.is_empty() && r.passed);
    }
}
