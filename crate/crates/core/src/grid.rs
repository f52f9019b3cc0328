//! Log-polar mesh on a planar cone.
//!
//! Radial levels are ℓ1 radii `r_i = R_max 2^{-(n_r - 1 - i)/k}` with `k`
//! levels per doubling, so a node and its double are both nodes. Angular
//! nodes are uniform in the angle `θ` swept from the boundary ray `a`; the
//! first and last columns lie on `∂K`. Node `(i, j)` has index `i n_a + j`.
//!
//! Values are interpolated through the ratio `W/ψ` with `ψ(x) = (q.x)^γ`,
//! `q ∈ int K*`: bilinear in `(ln r, θ)` on the mesh, and exactly
//! `γ`-homogeneous outside the radial range.

use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{Error, Result};
use crate::operator::in_open_cone;

pub const DEFAULT_LEVELS_PER_DOUBLING: usize = 20;

fn default_levels() -> usize {
    DEFAULT_LEVELS_PER_DOUBLING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub r_max: f64,
    pub n_radial: usize,
    pub n_angular: usize,
    #[serde(default = "default_levels")]
    pub levels_per_doubling: usize,
}

impl GridSpec {
    pub fn new(r_max: f64, n_radial: usize, n_angular: usize) -> Self {
        Self { r_max, n_radial, n_angular, levels_per_doubling: DEFAULT_LEVELS_PER_DOUBLING }
    }

    /// Halved mesh width: every node of `self` is node `(2i, 2j)` of the result.
    pub fn refined(&self) -> Self {
        Self {
            r_max: self.r_max,
            n_radial: 2 * self.n_radial.max(1) - 1,
            n_angular: 2 * self.n_angular - 1,
            levels_per_doubling: 2 * self.levels_per_doubling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeTag {
    ConeBoundary,
    FarField,
    Interior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub spec: GridSpec,
    /// Boundary ray the angle is measured from.
    pub ray_a: [f64; 2],
    /// Opening angle of the cone.
    pub width: f64,
    pub radii: Vec<f64>,
    pub thetas: Vec<f64>,
    pub nodes: Vec<[f64; 2]>,
    pub tags: Vec<NodeTag>,
    ln_r0: f64,
    ds: f64,
    dtheta: f64,
}

/// Mesh with the default number of levels per doubling.
pub fn build_grid(cone: &ConeSpec, r_max: f64, n_radial: usize, n_angular: usize) -> Result<Grid> {
    Grid::new(cone, &GridSpec::new(r_max, n_radial, n_angular))
}

impl Grid {
    pub fn new(cone: &ConeSpec, spec: &GridSpec) -> Result<Self> {
        if cone.dim() != 2 {
            return Err(Error::UnsupportedDimension(cone.dim()));
        }
        if !(spec.r_max > 0.0) || !spec.r_max.is_finite() {
            return Err(Error::InvalidParameter { name: "r_max", reason: format!("{} must be > 0", spec.r_max) });
        }
        if spec.n_radial < 1 || spec.n_angular < 3 {
            return Err(Error::InvalidParameter {
                name: "grid",
                reason: format!("need n_radial >= 1 and n_angular >= 3, got {}x{}", spec.n_radial, spec.n_angular),
            });
        }
        if spec.levels_per_doubling < 1 {
            return Err(Error::InvalidParameter { name: "levels_per_doubling", reason: "must be >= 1".into() });
        }
        let (a, b) = cone.boundary_rays()?;
        let width = (a[0] * b[1] - a[1] * b[0]).atan2(a[0] * b[0] + a[1] * b[1]);
        let ds = std::f64::consts::LN_2 / spec.levels_per_doubling as f64;
        let ln_rmax = spec.r_max.ln();
        let ln_r0 = ln_rmax - ds * (spec.n_radial - 1) as f64;
        let radii: Vec<f64> = (0..spec.n_radial).map(|i| (ln_r0 + ds * i as f64).exp()).collect();
        let dtheta = width / (spec.n_angular - 1) as f64;
        let thetas: Vec<f64> = (0..spec.n_angular).map(|j| dtheta * j as f64).collect();
        let mut nodes = Vec::with_capacity(radii.len() * thetas.len());
        let mut tags = Vec::with_capacity(nodes.capacity());
        for (i, r) in radii.iter().enumerate() {
            for (j, t) in thetas.iter().enumerate() {
                let w = unit_l1(a, *t);
                nodes.push([r * w[0], r * w[1]]);
                tags.push(if j == 0 || j + 1 == spec.n_angular {
                    NodeTag::ConeBoundary
                } else if i + 1 == spec.n_radial {
                    NodeTag::FarField
                } else {
                    NodeTag::Interior
                });
            }
        }
        // the last column is the rotated ray; snap it onto b exactly
        for i in 0..radii.len() {
            let k = i * spec.n_angular + spec.n_angular - 1;
            let s = radii[i] / (b[0].abs() + b[1].abs());
            nodes[k] = [b[0] * s, b[1] * s];
        }
        Ok(Self { spec: spec.clone(), ray_a: a, width, radii, thetas, nodes, tags, ln_r0, ds, dtheta })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_radial(&self) -> usize {
        self.radii.len()
    }

    pub fn n_angular(&self) -> usize {
        self.thetas.len()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_angular() + j
    }

    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k / self.n_angular(), k % self.n_angular())
    }

    pub fn dtheta(&self) -> f64 {
        self.dtheta
    }

    /// Angle of `y` measured from the ray `a`, clamped to the cone.
    pub fn angle(&self, y: &[f64; 2]) -> f64 {
        let a = self.ray_a;
        let t = (a[0] * y[1] - a[1] * y[0]).atan2(a[0] * y[0] + a[1] * y[1]);
        t.clamp(0.0, self.width)
    }

    /// Fractional angular coordinate `θ / Δθ`.
    pub fn angular_coordinate(&self, y: &[f64; 2]) -> f64 {
        self.angle(y) / self.dtheta
    }

    /// Fractional radial coordinate, unclamped.
    pub fn radial_coordinate(&self, y: &[f64; 2]) -> f64 {
        ((y[0].abs() + y[1].abs()).ln() - self.ln_r0) / self.ds
    }

    /// Nearest node on the same radial level structure (clamped).
    pub fn nearest(&self, y: &[f64; 2]) -> usize {
        let i = self.radial_coordinate(y).round().clamp(0.0, (self.n_radial() - 1) as f64) as usize;
        let j = self.angular_coordinate(y).round().clamp(0.0, (self.n_angular() - 1) as f64) as usize;
        self.index(i, j)
    }
}

/// Nearest angular index without trigonometry: the pseudo-angle
/// `1 − u/(|u| + w)`, with `u = a.y` and `w = a × y`, is increasing in the
/// angle, so the half-way directions between columns can be bucketed once.
#[derive(Debug, Clone)]
pub struct AngularIndex {
    ray_a: [f64; 2],
    /// Pseudo-angles of the half-way directions, ascending.
    bounds: Vec<f64>,
    /// First candidate index per bucket of `[0, 2]`.
    buckets: Vec<u32>,
}

fn pseudo_angle(u: f64, w: f64) -> f64 {
    let s = u.abs() + w;
    if s > 0.0 {
        1.0 - u / s
    } else {
        0.0
    }
}

impl AngularIndex {
    pub fn new(grid: &Grid) -> Self {
        let a = grid.ray_a;
        let n = grid.n_angular();
        let bounds: Vec<f64> = (0..n - 1)
            .map(|j| {
                let t = grid.dtheta * (j as f64 + 0.5);
                pseudo_angle(t.cos(), t.sin())
            })
            .collect();
        let nb = 8 * n;
        let buckets = (0..nb)
            .map(|b| {
                let start = 2.0 * b as f64 / nb as f64;
                bounds.partition_point(|x| *x < start) as u32
            })
            .collect();
        Self { ray_a: a, bounds, buckets }
    }

    /// Index of the column nearest in angle to `y`, clamped to the cone.
    pub fn nearest(&self, y: &[f64; 2]) -> usize {
        let a = self.ray_a;
        let u = a[0] * y[0] + a[1] * y[1];
        let w = a[0] * y[1] - a[1] * y[0];
        if w <= 0.0 {
            return 0;
        }
        let p = pseudo_angle(u, w);
        let nb = self.buckets.len();
        let b = ((p * 0.5 * nb as f64) as usize).min(nb - 1);
        let mut j = self.buckets[b] as usize;
        while j < self.bounds.len() && self.bounds[j] < p {
            j += 1;
        }
        j
    }
}

/// ℓ1-unit vector at angle `t` from `a`.
fn unit_l1(a: [f64; 2], t: f64) -> [f64; 2] {
    let (s, c) = t.sin_cos();
    let v = [a[0] * c - a[1] * s, a[0] * s + a[1] * c];
    let n = v[0].abs() + v[1].abs();
    [v[0] / n, v[1] / n]
}

/// Up to four nodal coefficients; the interpolated value is `Σ w_k W[idx_k]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stencil {
    pub idx: [u32; 4],
    pub w: [f64; 4],
    pub len: u8,
}

impl Stencil {
    pub fn apply(&self, values: &[f64]) -> f64 {
        (0..self.len as usize).map(|k| self.w[k] * values[self.idx[k] as usize]).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len as usize).map(|k| (self.idx[k] as usize, self.w[k]))
    }
}

/// Ratio interpolation with `ψ(x) = (q.x)^γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioInterpolator {
    pub q: [f64; 2],
    pub gamma: f64,
    inv_psi: Vec<f64>,
}

impl RatioInterpolator {
    pub fn new(grid: &Grid, q: [f64; 2], gamma: f64) -> Result<Self> {
        let inv_psi = grid
            .nodes
            .iter()
            .zip(&grid.tags)
            .map(|(x, tag)| {
                let s = q[0] * x[0] + q[1] * x[1];
                match (tag, s > 0.0) {
                    (NodeTag::ConeBoundary, _) => Ok(0.0),
                    (_, true) => Ok(s.powf(-gamma)),
                    (_, false) => Err(Error::DualMembership { slack: s }),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { q, gamma, inv_psi })
    }

    pub fn psi(&self, y: &[f64; 2]) -> f64 {
        (self.q[0] * y[0] + self.q[1] * y[1]).max(0.0).powf(self.gamma)
    }

    /// Coefficients of `W(y)`; `None` when `y` is not in `int K` (value 0).
    /// Boundary nodes carry `W = 0` and are dropped.
    pub fn stencil(&self, grid: &Grid, cone: &ConeSpec, y: &[f64; 2]) -> Option<Stencil> {
        if !in_open_cone(cone, y) {
            return None;
        }
        let psi = self.psi(y);
        if psi <= 0.0 {
            return None;
        }
        let nr = grid.n_radial();
        let na = grid.n_angular();
        let t = grid.radial_coordinate(y).clamp(0.0, (nr - 1) as f64);
        let u = grid.angular_coordinate(y);
        let (i0, ft) = if nr == 1 {
            (0, 0.0)
        } else {
            let i0 = (t.floor() as usize).min(nr - 2);
            (i0, t - i0 as f64)
        };
        let j0 = (u.floor() as usize).min(na - 2);
        let fu = (u - j0 as f64).clamp(0.0, 1.0);
        let mut s = Stencil::default();
        let mut push = |i: usize, j: usize, w: f64| {
            let k = grid.index(i, j);
            let c = w * psi * self.inv_psi[k];
            if w > 0.0 && c > 0.0 {
                s.idx[s.len as usize] = k as u32;
                s.w[s.len as usize] = c;
                s.len += 1;
            }
        };
        push(i0, j0, (1.0 - ft) * (1.0 - fu));
        push(i0, j0 + 1, (1.0 - ft) * fu);
        if nr > 1 {
            push(i0 + 1, j0, ft * (1.0 - fu));
            push(i0 + 1, j0 + 1, ft * fu);
        }
        Some(s)
    }

    pub fn eval(&self, grid: &Grid, cone: &ConeSpec, values: &[f64], y: &[f64; 2]) -> f64 {
        self.stencil(grid, cone, y).map_or(0.0, |s| s.apply(values))
    }
}
