//! Domain description, uniform grid, and vertex masks.
//!
//! The domain is the open square Ω = (−L, L)². The control region ω is an
//! axis-aligned box or a ball of radius ρ around a center x₀ that stays away
//! from the origin; the origin is where the diffusion coefficient degenerates.
//! All other modules address vertices through the index maps built here.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Shape of the control region ω.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlShape {
    /// Axis-aligned box of half-width ρ around the center (cheap masks).
    Box,
    /// Euclidean ball of radius ρ around the center.
    Ball,
}

/// Physical description of the domain, the control region, and the ball radii
/// used by the weight construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Half-width L of the square domain Ω = (−L, L)².
    pub half_width: f64,
    /// Degeneracy exponent α ∈ (0, 2) of the coefficient |x|^α.
    pub alpha: f64,
    /// Center x₀ of the control region.
    pub control_center: [f64; 2],
    /// Radius (or box half-width) ρ of the control region.
    pub control_radius: f64,
    /// Radius R of the ball around the origin entering the auxiliary-function
    /// geometry; the validator enforces B_{8R} ⊂ Ω.
    pub origin_ball_radius: f64,
    /// Shape of ω.
    pub control_shape: ControlShape,
}

impl DomainSpec {
    /// m = sup_{x∈Ω} |x| + 1 = √2·L + 1; shows up in the Poincaré constants.
    pub fn sup_radius_plus_one(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.half_width + 1.0
    }

    /// Distance from the origin to the control region (0 if inside).
    pub fn distance_origin_to_control(&self) -> f64 {
        let [cx, cy] = self.control_center;
        match self.control_shape {
            ControlShape::Box => {
                let dx = (cx.abs() - self.control_radius).max(0.0);
                let dy = (cy.abs() - self.control_radius).max(0.0);
                dx.hypot(dy)
            }
            ControlShape::Ball => (cx.hypot(cy) - self.control_radius).max(0.0),
        }
    }

    /// Checks every geometric constraint the rest of the library relies on.
    pub fn validate(&self) -> Result<()> {
        let l = self.half_width;
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::InvalidDomain(format!("half_width must be positive, got {l}")));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::InvalidDomain(format!(
                "alpha must lie in (0, 2), got {}",
                self.alpha
            )));
        }
        let rho = self.control_radius;
        if !(rho > 0.0) {
            return Err(Error::InvalidDomain("control_radius must be positive".into()));
        }
        let r = self.origin_ball_radius;
        if !(r > 0.0) {
            return Err(Error::InvalidDomain("origin_ball_radius must be positive".into()));
        }
        let [cx, cy] = self.control_center;
        if cx.abs() + rho >= l || cy.abs() + rho >= l {
            return Err(Error::InvalidDomain(
                "control region must be strictly contained in the domain".into(),
            ));
        }
        if self.distance_origin_to_control() <= 0.0 {
            return Err(Error::InvalidDomain(
                "control region must stay at positive distance from the origin".into(),
            ));
        }
        // The stricter of the two ball-containment constraints in play.
        if 8.0 * r >= l {
            return Err(Error::InvalidDomain(format!(
                "B_8R must fit inside the domain: 8R = {} ≥ L = {l}",
                8.0 * r
            )));
        }
        // Open balls B_3R(0) and B_3R(x₀) must be disjoint: |x₀| ≥ 6R, with
        // equality admitted up to rounding (the canonical geometry sits
        // exactly on it).
        if cx.hypot(cy) < 6.0 * r * (1.0 - 1e-12) {
            return Err(Error::InvalidDomain(format!(
                "|x0| = {} must be at least 6R = {}",
                cx.hypot(cy),
                6.0 * r
            )));
        }
        Ok(())
    }
}

/// Uniform vertex-centered grid over [−L, L]².
///
/// The vertex count per axis is odd so the origin lands exactly on a vertex;
/// face midpoints are then offset from vertices by h/2 and never coincide with
/// the origin, so the degenerate coefficient is only ever sampled at nonzero
/// points inside difference stencils.
#[derive(Debug, Clone)]
pub struct Grid {
    n: usize,
    h: f64,
    half_width: f64,
    interior_map: Vec<Option<u32>>,
    interior: Vec<u32>,
}

impl Grid {
    /// Vertices per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Grid spacing h = 2L/(n−1).
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Domain half-width L.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Total vertex count n².
    pub fn vertex_count(&self) -> usize {
        self.n * self.n
    }

    /// Number of interior (non-boundary) vertices.
    pub fn interior_count(&self) -> usize {
        self.interior.len()
    }

    /// Flat vertex index of (i, j) with i the x-index and j the y-index.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    /// (i, j) pair of a flat vertex index.
    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.n, idx / self.n)
    }

    /// Coordinates of vertex (i, j).
    #[inline]
    pub fn coords(&self, i: usize, j: usize) -> [f64; 2] {
        [
            -self.half_width + i as f64 * self.h,
            -self.half_width + j as f64 * self.h,
        ]
    }

    /// Flat index of the origin vertex.
    pub fn origin_index(&self) -> usize {
        let mid = (self.n - 1) / 2;
        self.index(mid, mid)
    }

    #[inline]
    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        i >= 1 && i + 1 < self.n && j >= 1 && j + 1 < self.n
    }

    /// Interior dof index of a vertex, if interior.
    #[inline]
    pub fn interior_dof(&self, vertex: usize) -> Option<usize> {
        self.interior_map[vertex].map(|d| d as usize)
    }

    /// Vertex index of an interior dof.
    #[inline]
    pub fn dof_vertex(&self, dof: usize) -> usize {
        self.interior[dof] as usize
    }

    /// Iterator over (dof, vertex, i, j) for all interior vertices.
    pub fn interior_iter(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        self.interior.iter().enumerate().map(move |(dof, &v)| {
            let (i, j) = self.ij(v as usize);
            (dof, v as usize, i, j)
        })
    }
}

/// Builds the grid; `n` must be odd and at least 9.
pub fn build_grid(spec: &DomainSpec, n: usize) -> Result<Grid> {
    spec.validate()?;
    if n % 2 == 0 {
        return Err(Error::InvalidGrid(format!("even vertex count {n}")));
    }
    if n < 9 {
        return Err(Error::InvalidGrid(format!("vertex count {n} below minimum 9")));
    }
    let h = 2.0 * spec.half_width / (n - 1) as f64;
    let mut interior_map = vec![None; n * n];
    let mut interior = Vec::with_capacity((n - 2) * (n - 2));
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let v = (j * n + i) as u32;
            interior_map[v as usize] = Some(interior.len() as u32);
            interior.push(v);
        }
    }
    Ok(Grid {
        n,
        h,
        half_width: spec.half_width,
        interior_map,
        interior,
    })
}

/// Region descriptor accepted by [`region_mask`].
#[derive(Debug, Clone)]
pub enum Region {
    /// The control region ω from a [`DomainSpec`].
    Control(DomainSpec),
    /// Closed ball of the given radius.
    Ball { center: [f64; 2], radius: f64 },
    /// Closed annulus inner ≤ |x − c| ≤ outer.
    Annulus {
        center: [f64; 2],
        inner: f64,
        outer: f64,
    },
    /// The whole domain, boundary included.
    All,
}

/// Boolean value per grid vertex.
#[derive(Debug, Clone)]
pub struct Mask {
    values: Vec<bool>,
}

impl Mask {
    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, vertex: usize) -> bool {
        self.values[vertex]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }
}

/// Marks the vertices inside a region. Regions are closed: a vertex exactly on
/// the boundary circle/box counts as inside.
pub fn region_mask(grid: &Grid, region: &Region) -> Result<Mask> {
    let l = grid.half_width();
    let check_inside = |center: [f64; 2], reach: f64, what: &str| -> Result<()> {
        if center[0].abs() + reach > l || center[1].abs() + reach > l {
            Err(Error::RegionOutsideDomain(format!(
                "{what} centered at ({}, {}) with reach {reach}",
                center[0], center[1]
            )))
        } else {
            Ok(())
        }
    };
    let mut values = vec![false; grid.vertex_count()];
    match region {
        Region::All => values.fill(true),
        Region::Ball { center, radius } => {
            check_inside(*center, *radius, "ball")?;
            fill_ball(grid, *center, *radius, &mut values);
        }
        Region::Annulus {
            center,
            inner,
            outer,
        } => {
            if inner > outer {
                return Err(Error::InvalidParameter(
                    "annulus inner radius exceeds outer radius".into(),
                ));
            }
            check_inside(*center, *outer, "annulus")?;
            for j in 0..grid.n() {
                for i in 0..grid.n() {
                    let [x, y] = grid.coords(i, j);
                    let d2 = sq(x - center[0]) + sq(y - center[1]);
                    values[grid.index(i, j)] = d2 >= sq(*inner) && d2 <= sq(*outer);
                }
            }
        }
        Region::Control(spec) => {
            spec.validate()?;
            let c = spec.control_center;
            let rho = spec.control_radius;
            check_inside(c, rho, "control region")?;
            match spec.control_shape {
                ControlShape::Ball => fill_ball(grid, c, rho, &mut values),
                ControlShape::Box => {
                    for j in 0..grid.n() {
                        for i in 0..grid.n() {
                            let [x, y] = grid.coords(i, j);
                            values[grid.index(i, j)] =
                                (x - c[0]).abs() <= rho && (y - c[1]).abs() <= rho;
                        }
                    }
                }
            }
        }
    }
    Ok(Mask { values })
}

fn fill_ball(grid: &Grid, center: [f64; 2], radius: f64, values: &mut [bool]) {
    for j in 0..grid.n() {
        for i in 0..grid.n() {
            let [x, y] = grid.coords(i, j);
            values[grid.index(i, j)] = sq(x - center[0]) + sq(y - center[1]) <= sq(radius);
        }
    }
}

#[inline]
fn sq(v: f64) -> f64 {
    v * v
}

/// The default configuration shared by tests and shipped configs.
pub fn canonical_domain(alpha: f64) -> DomainSpec {
    DomainSpec {
        half_width: 1.0,
        alpha,
        control_center: [0.6, 0.0],
        control_radius: 0.2,
        origin_ball_radius: 0.1,
        control_shape: ControlShape::Box,
    }
}
