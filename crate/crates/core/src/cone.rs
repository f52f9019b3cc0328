//! Polyhedral proper cones: the solvency cone `K`, its dual `K*`, the
//! support-function surrogate used by the trade branch of the HJB operator,
//! and the partial ordering `>=_K`.
//!
//! A cone is stored twice: as the conic hull of unit generators and as the
//! intersection of half-spaces `{x : n.x >= 0}` over unit facet normals.
//! Facet normals are enumerated from generators for `d <= 3`; in higher
//! dimension both descriptions must be supplied.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm, normalized, rank};

/// Default tolerance for cone membership.
pub const MEMBERSHIP_TOL: f64 = 1e-10;
/// Default tolerance for the ordering `>=_K`.
pub const ORDERING_TOL: f64 = 1e-8;
/// Slack allowed when checking generators against facet inequalities.
const CONSISTENCY_TOL: f64 = 1e-12;
const DEDUP_TOL: f64 = 1e-12;

/// Proportional transaction-cost coefficients `lambda[i][j]`: the price of
/// one unit of asset `j` paid in units of asset `i` is `1 + lambda[i][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostMatrix {
    pub lambda: Vec<Vec<f64>>,
}

impl CostMatrix {
    pub fn new(lambda: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { lambda };
        m.validate()?;
        Ok(m)
    }

    /// Same cost in both directions between every pair of assets.
    pub fn uniform(dim: usize, cost: f64) -> Result<Self> {
        let lambda = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 0.0 } else { cost }).collect())
            .collect();
        Self::new(lambda)
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lambda.len();
        if d == 0 {
            return Err(Error::InvalidCone("empty cost matrix".into()));
        }
        for (i, row) in self.lambda.iter().enumerate() {
            check_dim(d, row.len())?;
            for (j, &l) in row.iter().enumerate() {
                if !l.is_finite() || l < 0.0 {
                    return Err(Error::InvalidCone(format!("lambda[{i}][{j}] = {l} must be >= 0")));
                }
                if i == j && l != 0.0 {
                    return Err(Error::InvalidCone(format!("diagonal lambda[{i}][{i}] must be 0")));
                }
            }
        }
        Ok(())
    }
}

/// JSON description of a cone: either cost coefficients or an explicit
/// generator/facet pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConeConfig {
    Costs { costs: CostMatrix },
    Explicit { generators: Vec<Vec<f64>>, facet_normals: Vec<Vec<f64>> },
}

impl ConeConfig {
    pub fn build(&self) -> Result<ConeSpec> {
        match self {
            ConeConfig::Costs { costs } => ConeSpec::from_costs(costs),
            ConeConfig::Explicit { generators, facet_normals } => {
                ConeSpec::new(generators.clone(), facet_normals.clone())
            }
        }
    }
}

/// A polyhedral proper cone with nonempty interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    dim: usize,
    generators: Vec<Vec<f64>>,
    facet_normals: Vec<Vec<f64>>,
}

impl ConeSpec {
    /// Builds a cone from both of its descriptions; vectors are normalized.
    pub fn new(generators: Vec<Vec<f64>>, facet_normals: Vec<Vec<f64>>) -> Result<Self> {
        let dim = generators
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidCone("no generators".into()))?;
        if dim == 0 {
            return Err(Error::InvalidCone("zero-dimensional cone".into()));
        }
        let unit = |vs: Vec<Vec<f64>>, what: &str| -> Result<Vec<Vec<f64>>> {
            vs.into_iter()
                .map(|v| {
                    check_dim(dim, v.len())?;
                    normalized(&v).ok_or_else(|| Error::InvalidCone(format!("zero {what} vector")))
                })
                .collect()
        };
        let cone = Self {
            dim,
            generators: unit(generators, "generator")?,
            facet_normals: unit(facet_normals, "facet normal")?,
        };
        cone.check_invariants()?;
        Ok(cone)
    }

    /// Nonnegative orthant `R^d_+`.
    pub fn orthant(dim: usize) -> Result<Self> {
        let basis: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(basis.clone(), basis)
    }

    /// Solvency cone `cone{(1 + lambda_ij) e_i - e_j, e_i}` of the currency
    /// market with proportional costs.
    pub fn from_costs(costs: &CostMatrix) -> Result<Self> {
        costs.validate()?;
        let d = costs.dim();
        let mut generators = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let mut g = vec![0.0; d];
                    g[i] = 1.0 + costs.lambda[i][j];
                    g[j] = -1.0;
                    generators.push(g);
                }
            }
        }
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            generators.push(e);
        }
        let generators: Vec<Vec<f64>> =
            generators.iter().map(|g| normalized(g).expect("nonzero generator")).collect();
        let normals = enumerate_facets(&generators)?;
        Self::new(generators, normals)
    }

    fn check_invariants(&self) -> Result<()> {
        for (k, g) in self.generators.iter().enumerate() {
            let slack = self.min_facet_slack(g);
            if slack < -CONSISTENCY_TOL {
                return Err(Error::InvalidCone(format!(
                    "generator {k} violates a facet inequality (slack {slack:e})"
                )));
            }
        }
        if rank(&self.generators, 1e-12) < self.dim {
            return Err(Error::InvalidCone("generators do not span R^d: empty interior".into()));
        }
        if rank(&self.facet_normals, 1e-12) < self.dim {
            return Err(Error::PropernessViolation(
                "facet normals do not span R^d: the cone contains a line".into(),
            ));
        }
        for (k, g) in self.generators.iter().enumerate() {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            if self.min_facet_slack(&neg) >= -MEMBERSHIP_TOL {
                return Err(Error::PropernessViolation(format!(
                    "both generator {k} and its negation lie in the cone"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> &[Vec<f64>] {
        &self.generators
    }

    pub fn facet_normals(&self) -> &[Vec<f64>] {
        &self.facet_normals
    }

    /// `min_n n.x` over unit facet normals.
    pub fn min_facet_slack(&self, x: &[f64]) -> f64 {
        self.facet_normals.iter().map(|n| dot(n, x)).fold(f64::INFINITY, f64::min)
    }

    /// `min_g p.g` over unit generators; nonnegative iff `p` is in `K*`.
    pub fn min_dual_slack(&self, p: &[f64]) -> f64 {
        self.generators.iter().map(|g| dot(g, p)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        check_dim(self.dim, x.len())?;
        Ok(self.min_facet_slack(x) >= -tol)
    }

    /// Strict interior membership: every facet slack exceeds `tol`.
    pub fn interior_contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        check_dim(self.dim, x.len())?;
        Ok(self.min_facet_slack(x) > tol)
    }

    pub fn dual_contains(&self, p: &[f64], tol: f64) -> Result<bool> {
        check_dim(self.dim, p.len())?;
        Ok(self.min_dual_slack(p) >= -tol)
    }

    /// Surrogate for the support function of `G = (-K) ∩ S^{d-1}`: the max of
    /// `-g.p` over unit generators. Same sign pattern as the exact support
    /// function: `<= 0` iff `p ∈ K*`, `< 0` iff `p ∈ int K*`.
    pub fn sigma_g(&self, p: &[f64]) -> Result<f64> {
        check_dim(self.dim, p.len())?;
        Ok(-self.min_dual_slack(p))
    }

    /// `x >=_K y`, i.e. `x - y ∈ K`.
    pub fn ordering_geq(&self, x: &[f64], y: &[f64], tol: f64) -> Result<bool> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, y.len())?;
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        self.contains(&diff, tol)
    }

    /// Minimum facet slack of a point of `K`; zero exactly on the boundary.
    pub fn dist_to_boundary(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let slack = self.min_facet_slack(x);
        if slack < -MEMBERSHIP_TOL {
            return Err(Error::OutsideCone { slack });
        }
        Ok(slack.max(0.0))
    }

    /// Boundary rays `(a, b)` of a planar cone, ordered counter-clockwise so
    /// that the cone is swept from `a` to `b`.
    pub fn boundary_rays(&self) -> Result<([f64; 2], [f64; 2])> {
        if self.dim != 2 {
            return Err(Error::UnsupportedDimension(self.dim));
        }
        let mut rays: Vec<[f64; 2]> = Vec::new();
        for n in &self.facet_normals {
            for cand in [[-n[1], n[0]], [n[1], -n[0]]] {
                if self.min_facet_slack(&cand) >= -1e-12 {
                    rays.push(cand);
                    break;
                }
            }
        }
        let mut best: Option<([f64; 2], [f64; 2], f64)> = None;
        for a in &rays {
            for b in &rays {
                let cross = a[0] * b[1] - a[1] * b[0];
                let angle = cross.atan2(a[0] * b[0] + a[1] * b[1]);
                if angle > 0.0 && best.is_none_or(|(_, _, w)| angle > w) {
                    best = Some((*a, *b, angle));
                }
            }
        }
        best.map(|(a, b, _)| (a, b))
            .ok_or_else(|| Error::InvalidCone("planar cone without two boundary rays".into()))
    }

    /// A canonical interior direction of `K*`: the normalized sum of the
    /// unit facet normals.
    pub fn dual_interior_direction(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.dim];
        for n in &self.facet_normals {
            for (qi, ni) in q.iter_mut().zip(n) {
                *qi += ni;
            }
        }
        let s = norm(&q);
        q.iter().map(|v| v / s).collect()
    }
}

/// Facet normals of `cone(generators)` for `d <= 3`.
fn enumerate_facets(generators: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = generators[0].len();
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    match d {
        1 => {
            candidates.push(vec![1.0]);
            candidates.push(vec![-1.0]);
        }
        2 => {
            for g in generators {
                candidates.push(vec![-g[1], g[0]]);
                candidates.push(vec![g[1], -g[0]]);
            }
        }
        3 => {
            for (a, ga) in generators.iter().enumerate() {
                for gb in &generators[a + 1..] {
                    let c = vec![
                        ga[1] * gb[2] - ga[2] * gb[1],
                        ga[2] * gb[0] - ga[0] * gb[2],
                        ga[0] * gb[1] - ga[1] * gb[0],
                    ];
                    if norm(&c) > 1e-14 {
                        candidates.push(c.iter().map(|v| -v).collect());
                        candidates.push(c);
                    }
                }
            }
        }
        _ => return Err(Error::FacetEnumerationUnsupported(d)),
    }
    let mut normals: Vec<Vec<f64>> = Vec::new();
    for c in candidates {
        let Some(n) = normalized(&c) else { continue };
        let supporting = generators.iter().all(|g| dot(&n, g) >= -CONSISTENCY_TOL);
        let duplicate = normals
            .iter()
            .any(|m| m.iter().zip(&n).all(|(a, b)| (a - b).abs() < DEDUP_TOL));
        if supporting && !duplicate {
            normals.push(n);
        }
    }
    if normals.is_empty() || rank(&normals, 1e-12) < d {
        return Err(Error::PropernessViolation(
            "cost coefficients do not give efficient friction (K contains a line)".into(),
        ));
    }
    // A 3-d facet is only genuine if it touches at least two independent
    // generators; supporting planes through a single ray are redundant.
    if d == 3 {
        normals.retain(|n| {
            let touching: Vec<Vec<f64>> =
                generators.iter().filter(|g| dot(n, g).abs() < 1e-10).cloned().collect();
            rank(&touching, 1e-10) >= 2
        });
    }
    Ok(normals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn friction_cone() -> ConeSpec {
        ConeSpec::from_costs(&CostMatrix::uniform(2, 0.1).unwrap()).unwrap()
    }

    fn parallel(a: &[f64], b: &[f64]) -> bool {
        let (na, nb) = (norm(a), norm(b));
        (dot(a, b) / (na * nb) - 1.0).abs() < 1e-12
    }

    #[test]
    fn generators_of_currency_cone() {
        let k = friction_cone();
        let expected = [[1.1, -1.0], [-1.0, 1.1], [1.0, 0.0], [0.0, 1.0]];
        assert_eq!(k.generators().len(), 4);
        for e in expected {
            assert!(k.generators().iter().any(|g| parallel(g, &e)), "missing {e:?}");
        }
    }

    #[test]
    fn facet_normals_by_brute_force() {
        let k = friction_cone();
        assert_eq!(k.facet_normals().len(), 2);
        for e in [[1.0, 1.1], [1.1, 1.0]] {
            assert!(k.facet_normals().iter().any(|n| parallel(n, &e)), "missing {e:?}");
        }
        // each normal supports every generator and touches at least one
        for n in k.facet_normals() {
            assert!(k.generators().iter().all(|g| dot(n, g) >= -1e-12));
            assert!(k.generators().iter().any(|g| dot(n, g).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_costs_are_not_proper() {
        let err = ConeSpec::from_costs(&CostMatrix::uniform(2, 0.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::PropernessViolation(_)));
    }

    #[test]
    fn one_sided_costs_are_proper() {
        let costs = CostMatrix::new(vec![vec![0.0, 0.2], vec![0.0, 0.0]]).unwrap();
        assert!(ConeSpec::from_costs(&costs).is_ok());
    }

    #[test]
    fn membership() {
        let k = friction_cone();
        assert!(k.contains(&[1.0, 0.0], MEMBERSHIP_TOL).unwrap());
        assert!(!k.contains(&[-1.0, -1.0], MEMBERSHIP_TOL).unwrap());
        assert!(k.contains(&[1.1, -1.0], MEMBERSHIP_TOL).unwrap());
        assert!(k.min_facet_slack(&[1.1, -1.0]).abs() < 1e-15);
        assert!(matches!(
            k.contains(&[1.0], MEMBERSHIP_TOL),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dual_membership() {
        let q = ConeSpec::orthant(2).unwrap();
        assert!(q.dual_contains(&[1.0, 1.0], MEMBERSHIP_TOL).unwrap());
        let k = friction_cone();
        assert!(!k.dual_contains(&[1.0, 0.0], MEMBERSHIP_TOL).unwrap());
        assert!(k.dual_contains(&[0.0, 0.0], MEMBERSHIP_TOL).unwrap());
    }

    #[test]
    fn sigma_g_values() {
        let k = friction_cone();
        assert_relative_eq!(k.sigma_g(&[1.0, 1.0]).unwrap(), -0.1 / 2.21f64.sqrt(), epsilon = 1e-14);
        assert_eq!(k.sigma_g(&[0.0, 0.0]).unwrap(), 0.0);
        let q = ConeSpec::orthant(2).unwrap();
        assert_relative_eq!(q.sigma_g(&[-1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn ordering() {
        let q = ConeSpec::orthant(2).unwrap();
        assert!(q.ordering_geq(&[0.3, 0.4], &[0.3, 0.4], ORDERING_TOL).unwrap());
        assert!(q.ordering_geq(&[2.0, 2.0], &[1.0, 1.0], ORDERING_TOL).unwrap());
        let k = friction_cone();
        assert!(k.ordering_geq(&[2.1, 0.0], &[1.0, 1.0], ORDERING_TOL).unwrap());
        assert!(!k.ordering_geq(&[1.0, 1.0], &[2.1, 0.0], ORDERING_TOL).unwrap());
    }

    #[test]
    fn boundary_distance() {
        let q = ConeSpec::orthant(2).unwrap();
        assert_eq!(q.dist_to_boundary(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(q.dist_to_boundary(&[1.0, 2.0]).unwrap(), 1.0);
        let k = friction_cone();
        assert_relative_eq!(k.dist_to_boundary(&[1.0, 1.0]).unwrap(), 2.1 / 2.21f64.sqrt(), epsilon = 1e-14);
        assert!(matches!(k.dist_to_boundary(&[-1.0, 0.0]), Err(Error::OutsideCone { .. })));
    }

    #[test]
    fn explicit_description_round_trips() {
        let k = friction_cone();
        let again = ConeSpec::new(k.generators().to_vec(), k.facet_normals().to_vec()).unwrap();
        assert_eq!(k, again);
        // a normal set that cuts off a generator is rejected
        let bad = ConeSpec::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, -0.1], vec![0.0, 1.0]]);
        assert!(bad.is_err());
    }

    #[test]
    fn orthant_in_three_dimensions_from_costs() {
        let k = ConeSpec::from_costs(&CostMatrix::uniform(3, 0.05).unwrap()).unwrap();
        assert!(k.contains(&[1.0, 1.0, 1.0], MEMBERSHIP_TOL).unwrap());
        assert!(k.contains(&[1.05, -1.0, 0.0], MEMBERSHIP_TOL).unwrap());
        assert!(!k.contains(&[1.0, -1.0, 0.0], MEMBERSHIP_TOL).unwrap());
        for n in k.facet_normals() {
            assert!(k.generators().iter().all(|g| dot(n, g) >= -1e-12));
        }
    }

    #[test]
    fn boundary_rays_sweep_the_cone() {
        let k = friction_cone();
        let (a, b) = k.boundary_rays().unwrap();
        assert!(parallel(&a, &[1.1, -1.0]));
        assert!(parallel(&b, &[-1.0, 1.1]));
    }

    #[test]
    fn json_descriptions() {
        let c: ConeConfig = serde_json::from_str(r#"{"costs": [[0.0, 0.1], [0.1, 0.0]]}"#).unwrap();
        assert_eq!(c.build().unwrap(), friction_cone());
        let c: ConeConfig =
            serde_json::from_str(r#"{"generators": [[1, 0], [0, 1]], "facet_normals": [[1, 0], [0, 1]]}"#).unwrap();
        assert_eq!(c.build().unwrap(), ConeSpec::orthant(2).unwrap());
    }
}
