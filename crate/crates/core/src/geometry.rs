//! Discretised area, links, and link/grid traversal.
//!
//! Cells are indexed row-major: `m = row * nx + col`, where `col` runs along
//! +x and `row` along +y starting at the grid origin. Gradient vectors, noise
//! allocations and CSV dumps all use this ordering.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

/// Coordinates closer than this (in cell units) to a grid line are treated as
/// lying on it.
const LINE_SNAP: f64 = 1e-9;
/// Tolerance on the link parameter when comparing boundary crossings.
const T_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridSpec {
    origin: Point2,
    cell_size: f64,
    nx: usize,
    ny: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    origin: Point2,
    cell_size: f64,
    nx: usize,
    ny: usize,
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        GridSpec::new(raw.origin, raw.cell_size, raw.nx, raw.ny)
    }
}

impl From<GridSpec> for RawGrid {
    fn from(g: GridSpec) -> Self {
        RawGrid { origin: g.origin, cell_size: g.cell_size, nx: g.nx, ny: g.ny }
    }
}

impl GridSpec {
    pub fn new(origin: Point2, cell_size: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(invalid(format!("cell_size must be positive, got {cell_size}")));
        }
        if nx == 0 || ny == 0 {
            return Err(invalid(format!("grid needs at least one cell, got {nx}x{ny}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(invalid("grid origin must be finite"));
        }
        Ok(Self { origin, cell_size, nx, ny })
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Number of cells `M`.
    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.cell_size
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.cell_size
    }

    /// Lower-left and upper-right corners of the mapped area.
    pub fn bounds(&self) -> (Point2, Point2) {
        let [x0, y0] = self.origin;
        (self.origin, [x0 + self.width(), y0 + self.height()])
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.ny && col < self.nx);
        row * self.nx + col
    }

    pub fn row_col(&self, m: usize) -> (usize, usize) {
        (m / self.nx, m % self.nx)
    }

    /// Geometric center `c_m` of cell `m`.
    pub fn cell_center(&self, m: usize) -> Result<Point2> {
        if m >= self.num_cells() {
            return Err(invalid(format!(
                "cell index {m} out of range for {} cells",
                self.num_cells()
            )));
        }
        Ok(self.center_of(m))
    }

    pub(crate) fn center_of(&self, m: usize) -> Point2 {
        let (row, col) = self.row_col(m);
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ]
    }

    /// All cell centers in row-major order.
    pub fn centers(&self) -> Vec<Point2> {
        (0..self.num_cells()).map(|m| self.center_of(m)).collect()
    }

    /// Cell containing a horizontal point. Points exactly on an interior grid
    /// line belong to the lower-index cell; points outside the area map to
    /// `None`.
    pub fn locate(&self, p: Point2) -> Option<usize> {
        let u = (p[0] - self.origin[0]) / self.cell_size;
        let v = (p[1] - self.origin[1]) / self.cell_size;
        if !(u.is_finite() && v.is_finite()) {
            return None;
        }
        let eps = LINE_SNAP;
        if u < -eps || v < -eps || u > self.nx as f64 + eps || v > self.ny as f64 + eps {
            return None;
        }
        let col = axis_cell(snap(u), 0.0, self.nx);
        let row = axis_cell(snap(v), 0.0, self.ny);
        Some(self.index(row, col))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= LINE_SNAP {
        r
    } else {
        v
    }
}

/// Cell along one axis for a (snapped) coordinate in cell units, moving with
/// signed velocity `dir`. On a grid line the cell ahead of the motion is
/// chosen; without motion along this axis the lower cell wins.
fn axis_cell(coord: f64, dir: f64, n: usize) -> usize {
    let f = coord.floor();
    let i = if coord == f && dir <= 0.0 { f - 1.0 } else { f };
    i.clamp(0.0, (n - 1) as f64) as usize
}

/// A user-to-base-station link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLink", into = "RawLink")]
pub struct Link {
    p_u: Point3,
    p_d: Point3,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    p_u: Point3,
    p_d: Point3,
}

impl TryFrom<RawLink> for Link {
    type Error = Error;

    fn try_from(raw: RawLink) -> Result<Self> {
        Link::new(raw.p_u, raw.p_d)
    }
}

impl From<Link> for RawLink {
    fn from(l: Link) -> Self {
        RawLink { p_u: l.p_u, p_d: l.p_d }
    }
}

impl Link {
    pub fn new(p_u: Point3, p_d: Point3) -> Result<Self> {
        if !p_u.iter().chain(p_d.iter()).all(|v| v.is_finite()) {
            return Err(invalid("link endpoints must be finite"));
        }
        if p_u[2] < 0.0 || p_d[2] < 0.0 {
            return Err(invalid("link endpoints must have non-negative altitude"));
        }
        if p_u == p_d {
            return Err(invalid("link endpoints coincide"));
        }
        Ok(Self { p_u, p_d })
    }

    /// User endpoint.
    pub fn user(&self) -> Point3 {
        self.p_u
    }

    /// Base-station endpoint.
    pub fn station(&self) -> Point3 {
        self.p_d
    }

    /// The same link with endpoints swapped.
    pub fn reversed(&self) -> Link {
        Link { p_u: self.p_d, p_d: self.p_u }
    }
}

/// Euclidean 3D length of a link, `d(p)`.
pub fn link_distance(link: &Link) -> f64 {
    let [a, b] = [link.p_u, link.p_d];
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversedCell {
    pub cell: usize,
    /// Link altitude at the midpoint of its chord through the cell (m).
    pub z: f64,
    /// Horizontal chord length through the cell (m).
    pub chord: f64,
}

/// Ordered cells underneath a link, from the user end to the station end.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traversal {
    pub cells: Vec<TraversedCell>,
}

impl Traversal {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn contains(&self, m: usize) -> bool {
        self.cells.iter().any(|c| c.cell == m)
    }

    pub fn total_chord(&self) -> f64 {
        self.cells.iter().map(|c| c.chord).sum()
    }
}

/// Cells underneath `link` via 2D DDA over its horizontal projection.
///
/// The projection is clipped to the mapped area first; a link that misses
/// the area yields an empty traversal. A corner crossing steps diagonally, so
/// cells touched in a single point are not reported. A segment running
/// exactly along a grid line is assigned to the lower-index side.
pub fn traverse(grid: &GridSpec, link: &Link) -> Traversal {
    let [ax, ay, az] = link.p_u;
    let [bx, by, bz] = link.p_d;
    let (dx, dy) = (bx - ax, by - ay);
    let horizontal = dx.hypot(dy);
    let z_at = |t: f64| az + t * (bz - az);

    if horizontal == 0.0 {
        return match grid.locate([ax, ay]) {
            Some(cell) => Traversal { cells: vec![TraversedCell { cell, z: z_at(0.5), chord: 0.0 }] },
            None => Traversal::default(),
        };
    }

    let ((x0, y0), (x1, y1)) = {
        let (lo, hi) = grid.bounds();
        ((lo[0], lo[1]), (hi[0], hi[1]))
    };
    // Liang-Barsky clipping of the parameter range.
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for (p, q) in [(-dx, ax - x0), (dx, x1 - ax), (-dy, ay - y0), (dy, y1 - ay)] {
        if p == 0.0 {
            if q < 0.0 {
                return Traversal::default();
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t1 - t0 <= T_EPS {
        return Traversal::default();
    }

    let cs = grid.cell_size;
    let (du, dv) = (dx / cs, dy / cs);
    let us = snap((ax + t0 * dx - x0) / cs);
    let vs = snap((ay + t0 * dy - y0) / cs);
    let mut col = axis_cell(us, du, grid.nx) as i64;
    let mut row = axis_cell(vs, dv, grid.ny) as i64;

    let setup = |coord: f64, cell: i64, d: f64| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, t0 + ((cell + 1) as f64 - coord) / d, 1.0 / d)
        } else if d < 0.0 {
            (-1, t0 + (cell as f64 - coord) / d, -1.0 / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut t_max_x, t_delta_x) = setup(us, col, du);
    let (step_y, mut t_max_y, t_delta_y) = setup(vs, row, dv);

    let mut cells = Vec::with_capacity(grid.nx + grid.ny);
    let mut t_enter = t0;
    loop {
        let t_exit = t_max_x.min(t_max_y).min(t1);
        let t_mid = 0.5 * (t_enter + t_exit);
        cells.push(TraversedCell {
            cell: grid.index(row as usize, col as usize),
            z: z_at(t_mid),
            chord: (t_exit - t_enter) * horizontal,
        });
        if t_exit >= t1 - T_EPS {
            break;
        }
        if (t_max_x - t_max_y).abs() <= T_EPS {
            col += step_x;
            row += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        } else if t_max_x < t_max_y {
            col += step_x;
            t_max_x += t_delta_x;
        } else {
            row += step_y;
            t_max_y += t_delta_y;
        }
        if col < 0 || row < 0 || col >= grid.nx as i64 || row >= grid.ny as i64 {
            break;
        }
        t_enter = t_exit;
    }
    Traversal { cells }
}
