//! The driving Lévy process `Y_t = mu t + Xi w_t + compensated jumps` and the
//! price processes `S^i = E(Y^i)`.
//!
//! The jump measure is a finite list of atoms, so `Y` is a jump-diffusion with
//! compound-Poisson jumps; jump times are sampled exactly.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{check_dim, Error, Result};
use crate::linalg::norm;
use crate::rng::{path_rng, PathRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpAtom {
    /// Relative jump size of each price; every component must exceed -1.
    pub z: Vec<f64>,
    /// Intensity per unit time.
    pub lam: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyModel {
    pub mu: Vec<f64>,
    /// `d x m` diffusion factor; `A = Xi Xi^T`.
    pub xi: Vec<Vec<f64>>,
    #[serde(default)]
    pub jumps: Vec<JumpAtom>,
}

impl LevyModel {
    pub fn new(mu: Vec<f64>, xi: Vec<Vec<f64>>, jumps: Vec<JumpAtom>) -> Result<Self> {
        let m = Self { mu, xi, jumps };
        m.validate()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Number of Brownian factors.
    pub fn factors(&self) -> usize {
        self.xi.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidParameter { name: "mu", reason: "empty drift".into() });
        }
        check_dim(d, self.xi.len())?;
        let m = self.factors();
        for row in &self.xi {
            check_dim(m, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter { name: "xi", reason: "non-finite entry".into() });
            }
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter { name: "mu", reason: "non-finite entry".into() });
        }
        for (atom, j) in self.jumps.iter().enumerate() {
            check_dim(d, j.z.len())?;
            if let Some((component, &value)) = j.z.iter().enumerate().find(|(_, &v)| !(v > -1.0)) {
                return Err(Error::SupportViolation { atom, component, value });
            }
            if j.lam < 0.0 || j.lam.is_nan() {
                return Err(Error::NegativeIntensity { atom, lam: j.lam });
            }
        }
        let moment = self.integrability_moment();
        if !moment.is_finite() {
            return Err(Error::NonIntegrable(format!("sum lam (|z|^2 ∧ |z|) = {moment}")));
        }
        Ok(())
    }

    /// `∫ (|z|^2 ∧ |z|) Π(dz)` for the atomic measure.
    pub fn integrability_moment(&self) -> f64 {
        self.jumps
            .iter()
            .map(|j| {
                let n = norm(&j.z);
                j.lam * (n * n).min(n)
            })
            .sum()
    }

    /// Pairs `(point, atom)` for which the atom maps the point exactly onto
    /// `∂K`. Such coincidences break the hypothesis of the uniqueness theorem;
    /// each one is logged as a warning.
    pub fn boundary_hits(&self, cone: &ConeSpec, points: &[Vec<f64>], tol: f64) -> Vec<(usize, usize)> {
        let mut hits = Vec::new();
        for (pi, x) in points.iter().enumerate() {
            for (ai, atom) in self.active_jumps() {
                let y: Vec<f64> = x.iter().zip(&atom.z).map(|(xi, zi)| xi * (1.0 + zi)).collect();
                if cone.min_facet_slack(&y).abs() <= tol * (1.0 + norm(x)) {
                    log::warn!("jump atom {ai} maps point {x:?} onto the cone boundary");
                    hits.push((pi, ai));
                }
            }
        }
        hits
    }

    /// `A = Xi Xi^T`.
    pub fn a_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut a = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = self.xi[i].iter().zip(&self.xi[j]).map(|(x, y)| x * y).sum();
            }
        }
        a
    }

    /// Atoms with positive intensity, with their original indices.
    pub fn active_jumps(&self) -> impl Iterator<Item = (usize, &JumpAtom)> {
        self.jumps.iter().enumerate().filter(|(_, j)| j.lam > 0.0)
    }

    pub fn total_intensity(&self) -> f64 {
        self.active_jumps().map(|(_, j)| j.lam).sum()
    }

    /// `Σ_j lam_j z_j`, the drift removed by compensation.
    pub fn compensator(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        for (_, j) in self.active_jumps() {
            for (ci, zi) in c.iter_mut().zip(&j.z) {
                *ci += j.lam * zi;
            }
        }
        c
    }

    /// The same model with every jump intensity multiplied by `factor`.
    pub fn with_scaled_intensities(&self, factor: f64) -> Self {
        let mut m = self.clone();
        for j in &mut m.jumps {
            j.lam *= factor;
        }
        m
    }
}

/// One jump of `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    /// Index of the grid step `(t_k, t_{k+1}]` containing the jump.
    pub step: usize,
    pub atom: usize,
    pub z: Vec<f64>,
}

/// A simulated path of `Y` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathY {
    pub times: Vec<f64>,
    /// `Y_{t_k}`, one vector per grid time.
    pub y: Vec<Vec<f64>>,
    /// Cumulative Brownian motion `w_{t_k}`.
    pub w: Vec<Vec<f64>>,
    pub jumps: Vec<JumpEvent>,
    /// Diagonal of `A`: the rate of `<Y^{ic}>`.
    pub quad_var_rate: Vec<f64>,
    /// Per-step drift `mu - Σ lam z` used on the grid.
    pub drift: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
}

impl PathY {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Number of grid steps and the effective step for horizon `t` and target `dt`.
pub fn step_count(horizon: f64, dt: f64) -> Result<(usize, f64)> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter { name: "horizon", reason: format!("{horizon} <= 0") });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter { name: "dt", reason: format!("{dt} <= 0") });
    }
    let n = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, horizon / n as f64))
}

/// Draws the next arrival time of every active atom after `t`.
pub(crate) fn next_arrivals(model: &LevyModel, t: f64, rng: &mut PathRng) -> Vec<f64> {
    model
        .jumps
        .iter()
        .map(|j| if j.lam > 0.0 { t + exp_sample(j.lam, rng) } else { f64::INFINITY })
        .collect()
}

pub(crate) fn exp_sample(lam: f64, rng: &mut PathRng) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / lam
}

/// Simulates `Y` on `[0, horizon]`. The draws depend only on
/// `(seed, path_index)`.
pub fn simulate_path(model: &LevyModel, horizon: f64, dt: f64, seed: u64, path_index: u64) -> Result<PathY> {
    model.validate()?;
    let (n, h) = step_count(horizon, dt)?;
    let d = model.dim();
    let m = model.factors();
    let comp = model.compensator();
    let drift: Vec<f64> = model.mu.iter().zip(&comp).map(|(a, b)| a - b).collect();
    let mut rng = path_rng(seed, path_index);
    let mut next = next_arrivals(model, 0.0, &mut rng);

    let mut times = Vec::with_capacity(n + 1);
    let mut y = Vec::with_capacity(n + 1);
    let mut w = Vec::with_capacity(n + 1);
    let mut jumps = Vec::new();
    let mut cur_y = vec![0.0; d];
    let mut cur_w = vec![0.0; m];
    times.push(0.0);
    y.push(cur_y.clone());
    w.push(cur_w.clone());
    let sq = h.sqrt();
    let mut dw = vec![0.0; m];
    for k in 0..n {
        let t1 = if k + 1 == n { horizon } else { (k + 1) as f64 * h };
        for v in dw.iter_mut() {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *v = sq * xi;
        }
        for (wi, dwi) in cur_w.iter_mut().zip(&dw) {
            *wi += dwi;
        }
        for i in 0..d {
            let diff: f64 = model.xi[i].iter().zip(&dw).map(|(a, b)| a * b).sum();
            cur_y[i] += drift[i] * h + diff;
        }
        collect_jumps(model, t1, k, &mut next, &mut rng, &mut jumps);
        for ev in jumps.iter().rev().take_while(|e| e.step == k) {
            for (yi, zi) in cur_y.iter_mut().zip(&ev.z) {
                *yi += zi;
            }
        }
        times.push(t1);
        y.push(cur_y.clone());
        w.push(cur_w.clone());
    }
    let a = model.a_matrix();
    Ok(PathY {
        times,
        y,
        w,
        jumps,
        quad_var_rate: (0..d).map(|i| a[i][i]).collect(),
        drift,
        xi: model.xi.clone(),
    })
}

/// Appends, in time order, all jumps with arrival `<= t_end` and redraws
/// the next arrival of each atom that fired.
pub(crate) fn collect_jumps(
    model: &LevyModel,
    t_end: f64,
    step: usize,
    next: &mut [f64],
    rng: &mut PathRng,
    out: &mut Vec<JumpEvent>,
) {
    loop {
        let (atom, &time) = match next.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
            Some(v) => v,
            None => return,
        };
        if time > t_end {
            return;
        }
        out.push(JumpEvent { time, step, atom, z: model.jumps[atom].z.clone() });
        next[atom] = time + exp_sample(model.jumps[atom].lam, rng);
    }
}

/// Doléans-Dade exponential of `Y^i` at the grid times:
/// `exp(Y_t - ½<Y^c>_t) Π_{s<=t} (1 + ΔY_s) e^{-ΔY_s}`, with `S_0 = 1`.
pub fn stochastic_exponential(path: &PathY, i: usize) -> Result<Vec<f64>> {
    check_asset(path, i)?;
    let mut out = Vec::with_capacity(path.times.len());
    let mut log_jump = 0.0;
    let mut next_jump = 0;
    for (k, (&t, y)) in path.times.iter().zip(&path.y).enumerate() {
        while next_jump < path.jumps.len() && path.jumps[next_jump].step < k {
            let dz = path.jumps[next_jump].z[i];
            let factor = 1.0 + dz;
            if !(factor > 0.0) {
                return Err(Error::NonpositivePrice { step: path.jumps[next_jump].step, factor });
            }
            log_jump += factor.ln() - dz;
            next_jump += 1;
        }
        out.push((y[i] - 0.5 * path.quad_var_rate[i] * t + log_jump).exp());
    }
    Ok(out)
}

/// Step-by-step approximation of `S^i` on the grid: Milstein for the
/// continuous part and exact `(1 + ΔY)` factors at jumps. Converges to
/// [`stochastic_exponential`] with strong order one.
pub fn discretized_price(path: &PathY, i: usize) -> Result<Vec<f64>> {
    check_asset(path, i)?;
    let mut out = Vec::with_capacity(path.times.len());
    let mut s = 1.0;
    out.push(s);
    let mut next_jump = 0;
    for k in 0..path.steps() {
        let h = path.times[k + 1] - path.times[k];
        let dw: Vec<f64> = path.w[k + 1].iter().zip(&path.w[k]).map(|(a, b)| a - b).collect();
        let noise: f64 = path.xi[i].iter().zip(&dw).map(|(a, b)| a * b).sum();
        let aii = path.quad_var_rate[i];
        s *= 1.0 + path.drift[i] * h + noise + 0.5 * (noise * noise - aii * h);
        while next_jump < path.jumps.len() && path.jumps[next_jump].step == k {
            let factor = 1.0 + path.jumps[next_jump].z[i];
            if !(factor > 0.0) {
                return Err(Error::NonpositivePrice { step: k, factor });
            }
            s *= factor;
            next_jump += 1;
        }
        if !(s > 0.0) {
            return Err(Error::NonpositivePrice { step: k, factor: s });
        }
        out.push(s);
    }
    Ok(out)
}

fn check_asset(path: &PathY, i: usize) -> Result<()> {
    let d = path.quad_var_rate.len();
    if i >= d {
        return Err(Error::InvalidParameter { name: "asset", reason: format!("index {i} >= d = {d}") });
    }
    Ok(())
}

/// Writes `t, Y1..Yd, S1..Sd` rows with a header line.
pub fn write_path_csv<W: Write>(path: &PathY, out: &mut W) -> Result<()> {
    let d = path.quad_var_rate.len();
    let prices: Vec<Vec<f64>> = (0..d).map(|i| stochastic_exponential(path, i)).collect::<Result<_>>()?;
    let io = |e: std::io::Error| Error::InvalidParameter { name: "output", reason: e.to_string() };
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("Y{i}")));
    header.extend((1..=d).map(|i| format!("S{i}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (k, t) in path.times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(path.y[k].iter().map(f64::to_string));
        row.extend(prices.iter().map(|s| s[k].to_string()));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}
