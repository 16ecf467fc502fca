//! Windows, areal partitions, gridded covariate lattices, and the lookup
//! assigning spatial covariate values to arbitrary locations.
//!
//! All coordinates are planar (pre-projected); no geodesy is performed.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A planar location. Coordinates share the window's length unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A simple polygon with positive area. The vertex ring is stored open
/// (no repeated closing vertex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    vertices: Vec<Location>,
    area: f64,
    bbox: (Location, Location),
}

/// The spatial window of interest is itself a simple polygon.
pub type Window = Polygon;

impl Polygon {
    /// Builds a polygon from a vertex ring, validating simplicity and area.
    ///
    /// A repeated closing vertex is dropped. Fails on self-intersecting
    /// rings and on rings with zero area.
    pub fn new(mut vertices: Vec<Location>) -> Result<Self> {
        if vertices.len() >= 2 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::invalid("polygon needs at least 3 distinct vertices"));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::invalid("polygon vertices must be finite"));
        }
        if !ring_is_simple(&vertices) {
            return Err(Error::invalid("polygon boundary is self-intersecting"));
        }
        let area = shoelace_area(&vertices).abs();
        if area <= 0.0 {
            return Err(Error::invalid("polygon area must be positive"));
        }
        let (mut lo, mut hi) = (vertices[0], vertices[0]);
        for v in &vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        Ok(Polygon {
            vertices,
            area,
            bbox: (lo, hi),
        })
    }

    /// Axis-aligned rectangle `[x0,x1] x [y0,y1]`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Polygon::new(vec![
            Location::new(x0, y0),
            Location::new(x1, y0),
            Location::new(x1, y1),
            Location::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Location] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    /// Bounding box as (lower-left, upper-right).
    pub fn bbox(&self) -> (Location, Location) {
        self.bbox
    }

    /// Boundary-inclusive point-in-polygon test (crossing number, with an
    /// explicit on-edge check so boundary points count as inside).
    pub fn contains(&self, s: &Location) -> bool {
        let (lo, hi) = self.bbox;
        if s.x < lo.x || s.x > hi.x || s.y < lo.y || s.y > hi.y {
            return false;
        }
        if self.on_boundary(s) {
            return true;
        }
        let v = &self.vertices;
        let n = v.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            if (v[i].y > s.y) != (v[j].y > s.y) {
                let x_cross = v[j].x + (s.y - v[j].y) / (v[i].y - v[j].y) * (v[i].x - v[j].x);
                if s.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    fn on_boundary(&self, s: &Location) -> bool {
        let v = &self.vertices;
        let n = v.len();
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            let len = a.distance(&b);
            if len == 0.0 {
                continue;
            }
            let cross = (b.x - a.x) * (s.y - a.y) - (b.y - a.y) * (s.x - a.x);
            if cross.abs() > 1e-12 * len * (1.0 + a.distance(s)) {
                continue;
            }
            let dot = (s.x - a.x) * (b.x - a.x) + (s.y - a.y) * (b.y - a.y);
            if dot >= 0.0 && dot <= len * len {
                return true;
            }
        }
        false
    }

    /// Draws a uniform point inside the polygon by bounding-box rejection.
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Location {
        let (lo, hi) = self.bbox;
        loop {
            let p = Location::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
            if self.contains(&p) {
                return p;
            }
        }
    }
}

fn shoelace_area(v: &[Location]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

/// Rejects rings whose non-adjacent edges properly intersect or overlap.
fn ring_is_simple(v: &[Location]) -> bool {
    let n = v.len();
    for i in 0..n {
        let (a1, a2) = (v[i], v[(i + 1) % n]);
        for j in (i + 1)..n {
            // skip the shared-vertex neighbours of edge i
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (b1, b2) = (v[j], v[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

fn orient(a: Location, b: Location, c: Location) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_intersect(a1: Location, a2: Location, b1: Location, b2: Location) -> bool {
    let d1 = orient(a1, a2, b1);
    let d2 = orient(a1, a2, b2);
    let d3 = orient(b1, b2, a1);
    let d4 = orient(b1, b2, a2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |d: f64, p: Location, q: Location, r: Location| {
        d == 0.0
            && r.x >= p.x.min(q.x)
            && r.x <= p.x.max(q.x)
            && r.y >= p.y.min(q.y)
            && r.y <= p.y.max(q.y)
    };
    on(d1, a1, a2, b1) || on(d2, a1, a2, b2) || on(d3, b1, b2, a1) || on(d4, b1, b2, a2)
}

/// One areal unit: a polygon carrying an attribute vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArealUnit {
    pub polygon: Polygon,
    pub z: Vec<f64>,
}

/// A partition of the window into polygonal units with attribute vectors
/// of a common dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArealPartition {
    units: Vec<ArealUnit>,
    names: Vec<String>,
    window: Window,
}

impl ArealPartition {
    /// Validates that all attribute vectors share the named dimension, every
    /// unit lies within the window, and unit areas sum to the window area
    /// (1e-6 relative).
    pub fn new(units: Vec<ArealUnit>, names: Vec<String>, window: Window) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::invalid("areal partition needs at least one unit"));
        }
        let dim = names.len();
        for (i, u) in units.iter().enumerate() {
            if u.z.len() != dim {
                return Err(Error::invalid(format!(
                    "unit {i} has {} attributes, expected {dim}",
                    u.z.len()
                )));
            }
            if !u.z.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("unit {i} has non-finite attributes")));
            }
            for v in u.polygon.vertices() {
                if !window.contains(v) {
                    return Err(Error::invalid(format!(
                        "unit {i} vertex ({}, {}) lies outside the window",
                        v.x, v.y
                    )));
                }
            }
        }
        let total: f64 = units.iter().map(|u| u.polygon.area()).sum();
        if (total - window.area()).abs() > 1e-6 * window.area() {
            return Err(Error::invalid(format!(
                "unit areas sum to {total}, window area is {}",
                window.area()
            )));
        }
        Ok(ArealPartition {
            units,
            names,
            window,
        })
    }

    pub fn units(&self) -> &[ArealUnit] {
        &self.units
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Index of the containing unit; shared edges resolve to the lowest index.
    pub fn unit_index_at(&self, s: &Location) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u.polygon.contains(s))
            .ok_or(Error::NoContainingUnit { x: s.x, y: s.y })
    }

    /// Attribute vector of the containing unit.
    pub fn covariates_at(&self, s: &Location) -> Result<&[f64]> {
        Ok(&self.units[self.unit_index_at(s)?].z)
    }
}

/// A dense lattice of attribute vectors. `origin` is the center of cell
/// (0, 0); cell (ix, iy) has center `(origin.x + ix*dx, origin.y + iy*dy)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridField {
    origin: Location,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    names: Vec<String>,
    /// Row-major: cell (ix, iy) starts at `(iy * nx + ix) * dim`.
    values: Vec<f64>,
}

impl GridField {
    pub fn new(
        origin: Location,
        dx: f64,
        dy: f64,
        nx: usize,
        ny: usize,
        names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dx <= 0.0 || dy <= 0.0 {
            return Err(Error::invalid("grid cell sizes must be positive"));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("grid must have at least one cell"));
        }
        let dim = names.len();
        if values.len() != nx * ny * dim {
            return Err(Error::invalid(format!(
                "grid values length {} does not match {nx}x{ny}x{dim}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid values must be finite"));
        }
        Ok(GridField {
            origin,
            dx,
            dy,
            nx,
            ny,
            names,
            values,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (self.dx, self.dy)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Location {
        Location::new(
            self.origin.x + ix as f64 * self.dx,
            self.origin.y + iy as f64 * self.dy,
        )
    }

    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let dim = self.dim();
        let start = (iy * self.nx + ix) * dim;
        &self.values[start..start + dim]
    }

    /// Nearest cell index, ties broken toward the lower index on each axis.
    pub fn nearest_cell(&self, s: &Location) -> (usize, usize) {
        let ix = round_half_down((s.x - self.origin.x) / self.dx).clamp(0, self.nx as i64 - 1);
        let iy = round_half_down((s.y - self.origin.y) / self.dy).clamp(0, self.ny as i64 - 1);
        (ix as usize, iy as usize)
    }

    /// Attribute vector of the nearest cell center.
    pub fn covariates_at(&self, s: &Location) -> &[f64] {
        let (ix, iy) = self.nearest_cell(s);
        self.cell(ix, iy)
    }

    /// Rectangle hull covered by the cells (cell-size halos included).
    pub fn hull(&self) -> Result<Window> {
        Polygon::rectangle(
            self.origin.x - self.dx / 2.0,
            self.origin.y - self.dy / 2.0,
            self.origin.x + (self.nx as f64 - 0.5) * self.dx,
            self.origin.y + (self.ny as f64 - 0.5) * self.dy,
        )
    }
}

fn round_half_down(f: f64) -> i64 {
    (f - 0.5).ceil() as i64
}

/// Spatial covariates, either areal or gridded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CovariateField {
    Areal(ArealPartition),
    Grid(GridField),
}

impl CovariateField {
    pub fn names(&self) -> &[String] {
        match self {
            CovariateField::Areal(p) => p.names(),
            CovariateField::Grid(g) => g.names(),
        }
    }

    pub fn dim(&self) -> usize {
        self.names().len()
    }

    /// Attribute vector assigned to `s` (containing unit, or nearest cell).
    pub fn covariates_at(&self, s: &Location) -> Result<&[f64]> {
        match self {
            CovariateField::Areal(p) => p.covariates_at(s),
            CovariateField::Grid(g) => Ok(g.covariates_at(s)),
        }
    }

    /// The window the covariates live on: the partition window, or the
    /// grid's rectangle hull.
    pub fn window(&self) -> Result<Window> {
        match self {
            CovariateField::Areal(p) => Ok(p.window().clone()),
            CovariateField::Grid(g) => g.hull(),
        }
    }
}

/// Symmetric Euclidean distance matrix with zero diagonal.
pub fn pairwise_distances(locs: &[Location]) -> DMatrix<f64> {
    let n = locs.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = locs[i].distance(&locs[j]);
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}
