//! The nonlocal HJB operator
//!
//! `F(X, p, I, W, x) = max{ F0(X, p, I, W, x) + U*(p), Σ_G(p) }` with
//! `F0 = ½ tr A(x) X + μ(x).p + I − βW`, `A^{ij}(x) = a^{ij} x^i x^j`,
//! `μ^i(x) = μ^i x^i`, and the jump integral
//! `I(f, x) = Σ_j lam_j [ f(x + D_x z_j) 1_{int K}(x + D_x z_j) − f(x) − (D_x z_j).f'(x) ]`.
//!
//! Fields are anything implementing [`ScalarField`]; derivatives come from
//! the field when it knows them and from central differences otherwise.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{check_dim, Error, Result};
use crate::levy::LevyModel;
use crate::linalg::{dot, norm};

/// Admissible consumption directions.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum ConsumptionCone {
    /// `R_+ e_1`: consume the first (cash) asset.
    #[default]
    CashRay,
    General(ConeSpec),
}

/// Power utility `U(c) = (c.e1)^γ / γ` with discount rate `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySpec {
    pub gamma: f64,
    pub beta: f64,
    #[serde(skip)]
    pub consumption: ConsumptionCone,
}

/// Value of the Fenchel dual together with the maximizing consumption rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualValue {
    /// `+∞` when the supremum is unbounded.
    pub value: f64,
    pub c_star: Option<f64>,
}

impl UtilitySpec {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        let u = Self { gamma, beta, consumption: ConsumptionCone::CashRay };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter { name: "gamma", reason: format!("{} not in (0, 1)", self.gamma) });
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter { name: "beta", reason: format!("{} must be > 0", self.beta) });
        }
        Ok(())
    }

    /// `U` at consumption rate `c >= 0` of the cash asset.
    pub fn utility(&self, c: f64) -> f64 {
        if c <= 0.0 {
            0.0
        } else {
            c.powf(self.gamma) / self.gamma
        }
    }

    /// `U*(p) = sup_{c ∈ C} (U(c) − p.c)`.
    pub fn fenchel_dual(&self, p: &[f64]) -> Result<DualValue> {
        if let ConsumptionCone::General(_) = self.consumption {
            return Err(Error::Unsupported("Fenchel dual for a general consumption cone".into()));
        }
        let p1 = *p.first().ok_or(Error::DimensionMismatch { expected: 1, got: 0 })?;
        Ok(self.dual_scalar(p1))
    }

    pub(crate) fn dual_scalar(&self, p1: f64) -> DualValue {
        let g = self.gamma;
        if p1 > 0.0 {
            DualValue {
                value: (1.0 - g) / g * p1.powf(g / (g - 1.0)),
                c_star: Some(p1.powf(1.0 / (g - 1.0))),
            }
        } else {
            DualValue { value: f64::INFINITY, c_star: None }
        }
    }
}

/// A real function on `K`.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn hessian(&self, _x: &[f64]) -> Option<Vec<Vec<f64>>> {
        None
    }
    /// Membership in `C_1(K)`: `sup |f(x)| / (1 + |x|) < ∞`.
    fn sublinear_growth(&self) -> bool;
}

/// A field given by a closure.
pub struct FnField<F> {
    dim: usize,
    f: F,
    sublinear: bool,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnField<F> {
    pub fn new(dim: usize, sublinear: bool, f: F) -> Self {
        Self { dim, f, sublinear }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> ScalarField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn sublinear_growth(&self) -> bool {
        self.sublinear
    }
}

/// `½ x.Qx + b.x + c` with exact derivatives. Quadratics are not of
/// sublinear growth unless `Q = 0`.
#[derive(Debug, Clone)]
pub struct QuadraticField {
    pub q: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl QuadraticField {
    pub fn linear(b: Vec<f64>, c: f64) -> Self {
        let d = b.len();
        Self { q: vec![vec![0.0; d]; d], b, c }
    }
}

impl ScalarField for QuadraticField {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let qx: Vec<f64> = self.q.iter().map(|row| dot(row, x)).collect();
        0.5 * dot(x, &qx) + dot(&self.b, x) + self.c
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.q.iter().zip(&self.b).map(|(row, bi)| dot(row, x) + bi).collect())
    }
    fn hessian(&self, _x: &[f64]) -> Option<Vec<Vec<f64>>> {
        Some(self.q.clone())
    }
    fn sublinear_growth(&self) -> bool {
        self.q.iter().flatten().all(|v| *v == 0.0)
    }
}

/// `Σ_k w_k f_k`.
pub struct Combination<'a> {
    pub terms: Vec<(f64, &'a dyn ScalarField)>,
}

impl ScalarField for Combination<'_> {
    fn dim(&self) -> usize {
        self.terms.first().map_or(0, |(_, f)| f.dim())
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(w, f)| w * f.value(x)).sum()
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        for (w, f) in &self.terms {
            for (gi, fi) in g.iter_mut().zip(f.gradient(x)?) {
                *gi += w * fi;
            }
        }
        Some(g)
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<Vec<f64>>> {
        let d = x.len();
        let mut h = vec![vec![0.0; d]; d];
        for (w, f) in &self.terms {
            let hf = f.hessian(x)?;
            for i in 0..d {
                for j in 0..d {
                    h[i][j] += w * hf[i][j];
                }
            }
        }
        Some(h)
    }
    fn sublinear_growth(&self) -> bool {
        self.terms.iter().all(|(_, f)| f.sublinear_growth())
    }
}

fn shifted(x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[i] += h;
    y
}

/// Central-difference gradient.
pub fn fd_gradient(f: &dyn ScalarField, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| (f.value(&shifted(x, i, h)) - f.value(&shifted(x, i, -h))) / (2.0 * h))
        .collect()
}

/// Central-difference Hessian.
pub fn fd_hessian(f: &dyn ScalarField, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let f0 = f.value(x);
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        out[i][i] = (f.value(&shifted(x, i, h)) - 2.0 * f0 + f.value(&shifted(x, i, -h))) / (h * h);
        for j in 0..i {
            let pp = f.value(&shifted(&shifted(x, i, h), j, h));
            let pm = f.value(&shifted(&shifted(x, i, h), j, -h));
            let mp = f.value(&shifted(&shifted(x, i, -h), j, h));
            let mm = f.value(&shifted(&shifted(x, i, -h), j, -h));
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

/// Value and first two derivatives of a field at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
}

/// Jet of `f` at `x ∈ int K`, using analytic derivatives when available.
/// Finite differences use step `h`; a stencil that would leave `K` is
/// replaced by a one-sided gradient and a shrunk Hessian step.
pub fn jet(f: &dyn ScalarField, x: &[f64], h: f64, cone: &ConeSpec) -> Jet {
    let gradient = f.gradient(x).unwrap_or_else(|| {
        (0..x.len())
            .map(|i| {
                let plus = shifted(x, i, h);
                let minus = shifted(x, i, -h);
                let inside = |y: &[f64]| cone.min_facet_slack(y) > 0.0;
                match (inside(&plus), inside(&minus)) {
                    (true, true) => (f.value(&plus) - f.value(&minus)) / (2.0 * h),
                    (true, false) => {
                        (-3.0 * f.value(x) + 4.0 * f.value(&plus) - f.value(&shifted(x, i, 2.0 * h))) / (2.0 * h)
                    }
                    (false, true) => {
                        (3.0 * f.value(x) - 4.0 * f.value(&minus) + f.value(&shifted(x, i, -2.0 * h))) / (2.0 * h)
                    }
                    (false, false) => (f.value(&plus) - f.value(&minus)) / (2.0 * h),
                }
            })
            .collect()
    });
    let hessian = f.hessian(x).unwrap_or_else(|| {
        let slack = cone.min_facet_slack(x);
        let mut step = h;
        // keep the 9-point stencil inside K
        while step * std::f64::consts::SQRT_2 >= slack && step > h * 1e-6 {
            step *= 0.5;
        }
        fd_hessian(f, x, step)
    });
    Jet { value: f.value(x), gradient, hessian }
}

/// Default finite-difference step at `x`.
pub fn default_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + norm(x))
}

/// Jump integral with a known gradient at `x`.
pub fn nonlocal_i_with_gradient(
    f: &dyn ScalarField,
    x: &[f64],
    grad: &[f64],
    model: &LevyModel,
    cone: &ConeSpec,
) -> Result<f64> {
    if !f.sublinear_growth() {
        return Err(Error::GrowthViolation);
    }
    check_dim(model.dim(), x.len())?;
    let fx = f.value(x);
    let mut total = 0.0;
    let mut y = vec![0.0; x.len()];
    for (_, atom) in model.active_jumps() {
        let mut lin = 0.0;
        for i in 0..x.len() {
            let dz = x[i] * atom.z[i];
            y[i] = x[i] + dz;
            lin += dz * grad[i];
        }
        let landed = if in_open_cone(cone, &y) { f.value(&y) } else { 0.0 };
        total += atom.lam * ((landed - fx) - lin);
    }
    Ok(total)
}

/// `1_{int K}` with a scale-relative tolerance.
pub(crate) fn in_open_cone(cone: &ConeSpec, y: &[f64]) -> bool {
    cone.min_facet_slack(y) > 1e-12 * (1.0 + norm(y))
}

/// `I(f, x)`.
pub fn nonlocal_i(f: &dyn ScalarField, x: &[f64], model: &LevyModel, cone: &ConeSpec) -> Result<f64> {
    if !f.sublinear_growth() {
        return Err(Error::GrowthViolation);
    }
    let g = jet(f, x, default_step(x), cone).gradient;
    nonlocal_i_with_gradient(f, x, &g, model, cone)
}

/// `F0(X, p, I, W, x)`.
pub fn f0(xmat: &[Vec<f64>], p: &[f64], ival: f64, wval: f64, x: &[f64], model: &LevyModel, beta: f64) -> f64 {
    let a = model.a_matrix();
    let d = x.len();
    let mut second = 0.0;
    for i in 0..d {
        for j in 0..d {
            second += a[i][j] * x[i] * x[j] * xmat[i][j];
        }
    }
    let first: f64 = (0..d).map(|i| model.mu[i] * x[i] * p[i]).sum();
    0.5 * second + first + ival - beta * wval
}

/// Which branch of `F` attains the max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Hold,
    Trade,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorValue {
    pub value: f64,
    /// `F0 + U*`.
    pub hold: f64,
    /// `Σ_G(f'(x))`.
    pub trade: f64,
    pub branch: Branch,
}

/// `L0 f(x) = F0(f''(x), f'(x), I(f, x), f(x), x)`.
pub fn l0(f: &dyn ScalarField, x: &[f64], model: &LevyModel, cone: &ConeSpec, beta: f64) -> Result<f64> {
    let j = jet(f, x, default_step(x), cone);
    let ival = nonlocal_i_with_gradient(f, x, &j.gradient, model, cone)?;
    Ok(f0(&j.hessian, &j.gradient, ival, j.value, x, model, beta))
}

/// `L f(x) = max{F0 + U*, Σ_G}` together with the active branch; ties go to
/// the hold branch.
pub fn operator(
    f: &dyn ScalarField,
    x: &[f64],
    model: &LevyModel,
    cone: &ConeSpec,
    utility: &UtilitySpec,
) -> Result<OperatorValue> {
    check_dim(cone.dim(), x.len())?;
    let j = jet(f, x, default_step(x), cone);
    let ival = nonlocal_i_with_gradient(f, x, &j.gradient, model, cone)?;
    let hold = f0(&j.hessian, &j.gradient, ival, j.value, x, model, utility.beta)
        + utility.fenchel_dual(&j.gradient)?.value;
    let trade = cone.sigma_g(&j.gradient)?;
    let branch = if hold >= trade { Branch::Hold } else { Branch::Trade };
    Ok(OperatorValue { value: hold.max(trade), hold, trade, branch })
}

/// Writes `x1..xd, branch, hold, trade` rows.
pub fn write_trace_csv<W: Write>(rows: &[(Vec<f64>, OperatorValue)], out: &mut W) -> std::io::Result<()> {
    let d = rows.first().map_or(0, |(x, _)| x.len());
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.extend(["branch", "hold", "trade"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for (x, v) in rows {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(match v.branch {
            Branch::Hold => "hold".into(),
            Branch::Trade => "trade".into(),
        });
        row.push(v.hold.to_string());
        row.push(v.trade.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
