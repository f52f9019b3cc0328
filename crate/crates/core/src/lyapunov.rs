//! Lyapunov functions `f_p(x) = u(p.x)` with `u(z) = z^ρ/ρ`, the constants
//! controlling the sign of `L0 f_p`, and classical supersolutions `a f_p`.
//!
//! Suprema over `int K` of 0-homogeneous ratios are taken over the spherical
//! cap `K ∩ S^{d-1}`: a dense angular scan with local refinement for `d = 2`,
//! multistart projected gradient over generator weights for `d >= 3`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{check_dim, Error, Result};
use crate::levy::LevyModel;
use crate::linalg::{dot, norm};
use crate::operator::{l0, ScalarField, UtilitySpec};

/// Required `L0 f_p` bound at every node for a passing verification.
pub const LYAPUNOV_TOL: f64 = 1e-8;
/// Strictness margin for a classical strict supersolution.
pub const STRICT_MARGIN: f64 = -1e-10;
/// Dual slack of the normalized `p` below which the certificate is flagged.
pub const DUAL_MARGIN: f64 = 1e-6;

const SCAN_POINTS: usize = 10_000;
const MULTISTARTS: usize = 20;

/// `f_p(x) = (p.x)^ρ / ρ`, zero where `p.x <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPowerField {
    pub p: Vec<f64>,
    pub rho: f64,
}

impl LinearPowerField {
    fn u_prime(&self, z: f64) -> f64 {
        z.powf(self.rho - 1.0)
    }
}

impl ScalarField for LinearPowerField {
    fn dim(&self) -> usize {
        self.p.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let z = dot(&self.p, x);
        if z <= 0.0 {
            0.0
        } else {
            z.powf(self.rho) / self.rho
        }
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let z = dot(&self.p, x);
        (z > 0.0).then(|| {
            let d = self.u_prime(z);
            self.p.iter().map(|pi| d * pi).collect()
        })
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<Vec<f64>>> {
        let z = dot(&self.p, x);
        (z > 0.0).then(|| {
            let dd = (self.rho - 1.0) * z.powf(self.rho - 2.0);
            self.p.iter().map(|pi| self.p.iter().map(|pj| dd * pi * pj).collect()).collect()
        })
    }
    fn sublinear_growth(&self) -> bool {
        self.rho <= 1.0
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name: "rho", reason: format!("{rho} not in (0, 1)") })
    }
}

/// `R̄ = sup_z −u'^2/(u'' u) = ρ/(1 − ρ)` for power `u`.
pub fn r_bar(rho: f64) -> f64 {
    rho / (1.0 - rho)
}

/// Unit vector at angle `t` from the boundary ray `a` of a planar cone.
fn cap_point(a: [f64; 2], t: f64) -> [f64; 2] {
    let (s, c) = t.sin_cos();
    [a[0] * c - a[1] * s, a[0] * s + a[1] * c]
}

fn project_simplex(w: &mut [f64]) {
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - 1.0) / (k as f64 + 1.0);
        if v - t > 0.0 {
            shift = t;
        }
    }
    for v in w.iter_mut() {
        *v = (*v - shift).max(0.0);
    }
}

/// `sup f` over the unit vectors of `K`.
pub fn cap_sup(cone: &ConeSpec, f: impl Fn(&[f64]) -> f64) -> f64 {
    match cone.dim() {
        1 => f(&cone.generators()[0]),
        2 => {
            let (a, b) = cone.boundary_rays().expect("planar cone");
            let width = (a[0] * b[1] - a[1] * b[0]).atan2(dot(&a, &b));
            let h = width / (SCAN_POINTS - 1) as f64;
            let g = |t: f64| f(&cap_point(a, t.clamp(0.0, width)));
            let (mut best_k, mut best) = (0, f64::NEG_INFINITY);
            for k in 0..SCAN_POINTS {
                let v = g(k as f64 * h);
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            // golden section on the bracketing cells
            let (mut lo, mut hi) = ((best_k as f64 - 1.0) * h, (best_k as f64 + 1.0) * h);
            let r = 0.5 * (5f64.sqrt() - 1.0);
            let (mut m1, mut m2) = (hi - r * (hi - lo), lo + r * (hi - lo));
            let (mut f1, mut f2) = (g(m1), g(m2));
            while hi - lo > 1e-10 {
                if f1 < f2 {
                    lo = m1;
                    m1 = m2;
                    f1 = f2;
                    m2 = lo + r * (hi - lo);
                    f2 = g(m2);
                } else {
                    hi = m2;
                    m2 = m1;
                    f2 = f1;
                    m1 = hi - r * (hi - lo);
                    f1 = g(m1);
                }
            }
            best.max(f1).max(f2)
        }
        _ => {
            let gens = cone.generators();
            let n = gens.len();
            let point = |w: &[f64]| -> Option<Vec<f64>> {
                let mut x = vec![0.0; cone.dim()];
                for (wk, g) in w.iter().zip(gens) {
                    for (xi, gi) in x.iter_mut().zip(g) {
                        *xi += wk * gi;
                    }
                }
                let s = norm(&x);
                (s > 1e-14).then(|| x.iter().map(|v| v / s).collect())
            };
            let obj = |w: &[f64]| point(w).map_or(f64::NEG_INFINITY, |x| f(&x));
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut starts: Vec<Vec<f64>> = Vec::with_capacity(MULTISTARTS);
            starts.push(vec![1.0 / n as f64; n]);
            for k in 0..n.min(MULTISTARTS - 1) {
                let mut w = vec![0.0; n];
                w[k] = 1.0;
                starts.push(w);
            }
            while starts.len() < MULTISTARTS {
                let mut w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                starts.push(w);
            }
            let mut best = f64::NEG_INFINITY;
            for mut w in starts {
                let mut val = obj(&w);
                let mut step = 0.1;
                for _ in 0..2000 {
                    let eps = 1e-7;
                    let grad: Vec<f64> = (0..n)
                        .map(|k| {
                            let mut wp = w.clone();
                            wp[k] += eps;
                            let mut wm = w.clone();
                            wm[k] = (wm[k] - eps).max(0.0);
                            (obj(&wp) - obj(&wm)) / (wp[k] - wm[k])
                        })
                        .collect();
                    let mut cand: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
                    project_simplex(&mut cand);
                    let cv = obj(&cand);
                    if cv > val + 1e-15 {
                        let gain = cv - val;
                        w = cand;
                        val = cv;
                        step *= 1.5;
                        if gain < 1e-14 {
                            break;
                        }
                    } else {
                        step *= 0.5;
                        if step < 1e-12 {
                            break;
                        }
                    }
                }
                best = best.max(val);
            }
            best
        }
    }
}

/// `min_{x ∈ K, |x| = 1} p.x`.
pub fn min_unit_pairing(cone: &ConeSpec, p: &[f64]) -> Result<f64> {
    check_dim(cone.dim(), p.len())?;
    Ok(-cap_sup(cone, |x| -dot(p, x)))
}

/// `κ_p = sup_{x ∈ int K} u'(px)|p||x| / u(px) = ρ|p| / min_{|x|=1} p.x`.
pub fn kappa_p(cone: &ConeSpec, p: &[f64], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let m = min_unit_pairing(cone, p)?;
    if m <= 1e-14 * norm(p) {
        return Err(Error::DualMembership { slack: m });
    }
    Ok(rho * norm(p) / m)
}

/// `η_p = κ Σ_{|z_j| > 1/κ} lam_j |z_j|`.
pub fn eta_p(model: &LevyModel, kappa: f64) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    model
        .active_jumps()
        .map(|(_, a)| (norm(&a.z), a.lam))
        .filter(|(z, _)| *z > 1.0 / kappa)
        .map(|(z, lam)| kappa * lam * z)
        .sum()
}

/// `<μ(x), p>` and `<A(x)p, p>`.
fn drift_and_variance(model: &LevyModel, a: &[Vec<f64>], p: &[f64], x: &[f64]) -> (f64, f64) {
    let d = x.len();
    let mp: f64 = (0..d).map(|i| model.mu[i] * x[i] * p[i]).sum();
    let mut ap = 0.0;
    for i in 0..d {
        for j in 0..d {
            ap += a[i][j] * x[i] * x[j] * p[i] * p[j];
        }
    }
    (mp, ap)
}

/// `η̃_p = ½ sup <μ(x),p>^2 / <A(x)p,p>`, restricted to `<A(x)p,p> != 0`.
pub fn eta_tilde_p(model: &LevyModel, cone: &ConeSpec, p: &[f64]) -> Result<f64> {
    check_dim(cone.dim(), p.len())?;
    check_dim(model.dim(), p.len())?;
    let a = model.a_matrix();
    let s = cap_sup(cone, |x| {
        let (mp, ap) = drift_and_variance(model, &a, p, x);
        if ap != 0.0 {
            mp * mp / ap
        } else {
            0.0
        }
    });
    Ok(0.5 * s.max(0.0))
}

/// `η̃_p R̄ + η_p + max_i |μ_i| κ_p`.
pub fn beta_threshold(eta_tilde: f64, r_bar: f64, eta_p: f64, kappa: f64, mu: &[f64]) -> f64 {
    let mu_max = mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    eta_tilde * r_bar + eta_p + mu_max * kappa
}

/// The sharper bound `sup_x { ½ R̄ <μ,p>^2/<Ap,p> 1{<Ap,p> != 0}
/// + <μ,p> u'(px)/u(px) 1{<Ap,p> = 0} } + η_p`.
pub fn tight_beta_threshold(model: &LevyModel, cone: &ConeSpec, p: &[f64], rho: f64, eta_p: f64) -> Result<f64> {
    check_rho(rho)?;
    check_dim(cone.dim(), p.len())?;
    let a = model.a_matrix();
    let rb = r_bar(rho);
    let s = cap_sup(cone, |x| {
        let (mp, ap) = drift_and_variance(model, &a, p, x);
        if ap != 0.0 {
            0.5 * rb * mp * mp / ap
        } else {
            let px = dot(p, x);
            if px > 0.0 {
                rho * mp / px
            } else {
                0.0
            }
        }
    });
    Ok(s.max(0.0) + eta_p)
}

/// Outcome of a grid check of `L0 f_p <= 0` and `Σ_G(f_p') < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub beta: f64,
    pub nodes: usize,
    pub max_l0: f64,
    pub worst_node: Vec<f64>,
    pub max_sigma_g: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub p: Vec<f64>,
    pub rho: f64,
    pub r_bar: f64,
    pub kappa_p: f64,
    pub eta_p: f64,
    pub eta_tilde_p: f64,
    pub beta_threshold: f64,
    pub tight_beta_threshold: f64,
    /// `min_g p̂.g`; below [`DUAL_MARGIN`] the certificate is near `∂K*`.
    pub dual_margin: f64,
    pub scale: Option<f64>,
    pub verified: bool,
    pub report: Option<VerificationReport>,
}

impl LyapunovCertificate {
    /// Computes every constant; errors with `DualMembership` unless `p ∈ int K*`.
    pub fn compute(model: &LevyModel, cone: &ConeSpec, p: &[f64], rho: f64) -> Result<Self> {
        check_rho(rho)?;
        check_dim(cone.dim(), p.len())?;
        check_dim(model.dim(), p.len())?;
        let pn = norm(p);
        if pn == 0.0 {
            return Err(Error::DualMembership { slack: 0.0 });
        }
        let dual_margin = cone.min_dual_slack(p) / pn;
        if dual_margin <= 0.0 {
            return Err(Error::DualMembership { slack: dual_margin });
        }
        if dual_margin < DUAL_MARGIN {
            log::warn!("certificate direction {p:?} is within {dual_margin:e} of the dual boundary");
        }
        let kappa = kappa_p(cone, p, rho)?;
        let ep = eta_p(model, kappa);
        let et = eta_tilde_p(model, cone, p)?;
        let rb = r_bar(rho);
        Ok(Self {
            p: p.to_vec(),
            rho,
            r_bar: rb,
            kappa_p: kappa,
            eta_p: ep,
            eta_tilde_p: et,
            beta_threshold: beta_threshold(et, rb, ep, kappa, &model.mu),
            tight_beta_threshold: tight_beta_threshold(model, cone, p, rho, ep)?,
            dual_margin,
            scale: None,
            verified: false,
            report: None,
        })
    }

    pub fn field(&self) -> LinearPowerField {
        LinearPowerField { p: self.p.clone(), rho: self.rho }
    }

    /// `a f_p(x)` with the stored scale.
    pub fn bound(&self, x: &[f64]) -> Option<f64> {
        self.scale.map(|a| a * self.field().value(x))
    }
}

fn l0_values(cert: &LyapunovCertificate, model: &LevyModel, cone: &ConeSpec, beta: f64, nodes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let f = cert.field();
    nodes.par_iter().map(|x| l0(&f, x, model, cone, beta)).collect()
}

/// Checks the Lyapunov property of `f_p` at every node (nodes off `int K`
/// are skipped) and records the outcome in the certificate.
pub fn verify_lyapunov(
    cert: &mut LyapunovCertificate,
    model: &LevyModel,
    cone: &ConeSpec,
    beta: f64,
    nodes: &[Vec<f64>],
) -> Result<VerificationReport> {
    let inner: Vec<Vec<f64>> = nodes.iter().filter(|x| cone.min_facet_slack(x) > 0.0).cloned().collect();
    let values = l0_values(cert, model, cone, beta, &inner)?;
    let f = cert.field();
    let mut max_l0 = f64::NEG_INFINITY;
    let mut worst = Vec::new();
    let mut max_sigma = f64::NEG_INFINITY;
    for (x, v) in inner.iter().zip(&values) {
        if *v > max_l0 {
            max_l0 = *v;
            worst = x.clone();
        }
        let g = f.gradient(x).unwrap_or_else(|| vec![0.0; x.len()]);
        max_sigma = max_sigma.max(cone.sigma_g(&g)?);
    }
    let passed = !inner.is_empty() && max_l0 <= LYAPUNOV_TOL && max_sigma < 0.0;
    let report = VerificationReport { beta, nodes: inner.len(), max_l0, worst_node: worst, max_sigma_g: max_sigma, passed };
    cert.verified = passed;
    cert.report = Some(report.clone());
    Ok(report)
}

/// Largest value over the nodes of `L(a f_p) = a L0 f_p + U*(a f_p')`,
/// together with the largest trade-branch value.
pub fn supersolution_margin(
    cert: &LyapunovCertificate,
    utility: &UtilitySpec,
    cone: &ConeSpec,
    nodes: &[Vec<f64>],
    l0s: &[f64],
    a: f64,
) -> Result<(f64, f64)> {
    let f = cert.field();
    let mut hold = f64::NEG_INFINITY;
    let mut trade = f64::NEG_INFINITY;
    for (x, v) in nodes.iter().zip(l0s) {
        let g: Vec<f64> = f.gradient(x).unwrap_or_else(|| vec![0.0; x.len()]).iter().map(|gi| a * gi).collect();
        hold = hold.max(a * v + utility.fenchel_dual(&g)?.value);
        trade = trade.max(cone.sigma_g(&g)?);
    }
    Ok((hold, trade))
}

/// Smallest `a` (to 1e-3 relative) such that `a f_p` is a strict classical
/// supersolution at every node; stores it in the certificate.
pub fn supersolution_scale(
    cert: &mut LyapunovCertificate,
    model: &LevyModel,
    cone: &ConeSpec,
    utility: &UtilitySpec,
    nodes: &[Vec<f64>],
) -> Result<f64> {
    utility.validate()?;
    if (utility.gamma - cert.rho).abs() > 1e-12 {
        return Err(Error::InvalidParameter {
            name: "rho",
            reason: format!("supersolution search needs rho = gamma, got {} and {}", cert.rho, utility.gamma),
        });
    }
    let inner: Vec<Vec<f64>> = nodes.iter().filter(|x| cone.min_facet_slack(x) > 0.0).cloned().collect();
    if inner.is_empty() {
        return Err(Error::NoScaleFound("no interior nodes".into()));
    }
    let l0s = l0_values(cert, model, cone, utility.beta, &inner)?;
    if let Some((k, v)) = l0s.iter().enumerate().find(|(_, v)| **v >= 0.0) {
        return Err(Error::NoScaleFound(format!("L0 f_p = {v:e} >= 0 at {:?}", inner[k])));
    }
    let ok = |a: f64| -> Result<bool> {
        let (hold, trade) = supersolution_margin(cert, utility, cone, &inner, &l0s, a)?;
        Ok(hold < STRICT_MARGIN && trade < STRICT_MARGIN)
    };
    let (mut lo, mut hi) = (1.0, 1.0);
    if ok(1.0)? {
        for _ in 0..200 {
            lo *= 0.5;
            if !ok(lo)? {
                break;
            }
            hi = lo;
        }
    } else {
        let mut found = false;
        for _ in 0..200 {
            hi *= 2.0;
            if ok(hi)? {
                found = true;
                break;
            }
            lo = hi;
        }
        if !found {
            return Err(Error::NoScaleFound("doubling exhausted".into()));
        }
    }
    while (hi - lo) / hi > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    cert.scale = Some(hi);
    Ok(hi)
}

/// Interior verification nodes of a planar cone: `n_r` radii up to `r_max`
/// (ℓ1 norm, geometric from `r_max / 2^(n_r-1)`) times `n_a` angles strictly
/// inside the cap. For `d = 1` the angle count is ignored.
pub fn verification_nodes(cone: &ConeSpec, r_max: f64, n_r: usize, n_a: usize) -> Result<Vec<Vec<f64>>> {
    let radii: Vec<f64> = (0..n_r).map(|i| r_max * 0.5f64.powi((n_r - 1 - i) as i32)).collect();
    match cone.dim() {
        1 => Ok(radii.iter().map(|r| vec![r * cone.generators()[0][0].signum()]).collect()),
        2 => {
            let (a, b) = cone.boundary_rays()?;
            let width = (a[0] * b[1] - a[1] * b[0]).atan2(dot(&a, &b));
            let mut out = Vec::with_capacity(n_r * n_a);
            for r in &radii {
                for j in 0..n_a {
                    let w = cap_point(a, width * (j as f64 + 0.5) / n_a as f64);
                    let s = r / (w[0].abs() + w[1].abs());
                    out.push(vec![w[0] * s, w[1] * s]);
                }
            }
            Ok(out)
        }
        d => Err(Error::UnsupportedDimension(d)),
    }
}
