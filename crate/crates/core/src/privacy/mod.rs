//! Noise mechanisms for the uploaded obstacle-map gradient.
//!
//! Every mechanism spends a variance budget `sum sigma_m^2 <= mu * sum G_m^2`
//! relative to the clipped gradient `G`. The uniform baseline spreads it
//! evenly; the geometry-aligned allocator shapes it as a clipped plane over
//! the cell centers, tilted so that the noise centroid drags the adversary's
//! estimate away from the user.

mod allocator;
mod objective;

use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{GridSpec, Point2};

pub use allocator::{default_r_max, optimize_allocation, AllocationResult, AllocatorConfig};
pub use objective::{localization_error_p, objective_j, spatial_variance_v};

/// Absolute slack allowed on the variance budget.
pub const BUDGET_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Clipping only.
    #[default]
    None,
    Uniform,
    #[serde(alias = "geo")]
    GeometryAligned,
}

impl Mechanism {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Uniform => "uniform",
            Mechanism::GeometryAligned => "geo",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mechanism::None),
            "uniform" => Ok(Mechanism::Uniform),
            "geo" | "geometry_aligned" => Ok(Mechanism::GeometryAligned),
            other => Err(invalid(format!("unknown mechanism '{other}'"))),
        }
    }
}

/// Per-cell noise variances `sigma_m^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAllocation {
    variances: Vec<f64>,
}

impl NoiseAllocation {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("noise variances must be finite and non-negative"));
        }
        Ok(Self { variances })
    }

    pub fn zeros(num_cells: usize) -> Self {
        Self { variances: vec![0.0; num_cells] }
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn total(&self) -> f64 {
        self.variances.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    /// Whether the allocation respects `mu * sum G^2` (with absolute slack).
    pub fn within_budget(&self, g_clipped: &[f64], mu: f64) -> bool {
        self.total() <= mu * energy(g_clipped) + BUDGET_SLACK
    }
}

/// Linear plane `sigma_m^2 = max(0, r u.c_m + b - G_m^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneParams {
    u: Point2,
    r: f64,
    b: f64,
}

impl PlaneParams {
    pub fn new(u: Point2, r: f64, b: f64) -> Result<Self> {
        if !(u[0].is_finite() && u[1].is_finite() && r.is_finite() && b.is_finite()) {
            return Err(invalid("plane parameters must be finite"));
        }
        if ((u[0] * u[0] + u[1] * u[1]).sqrt() - 1.0).abs() > 1e-12 {
            return Err(invalid("plane direction must be a unit vector"));
        }
        if r < 0.0 {
            return Err(invalid(format!("plane slope must be non-negative, got {r}")));
        }
        Ok(Self { u, r, b })
    }

    pub fn u(&self) -> Point2 {
        self.u
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

pub(crate) fn energy(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum()
}

/// Same variance `mu * ||g||^2 / M` on every cell.
pub fn uniform_allocation(g_clipped: &[f64], mu: f64) -> Result<NoiseAllocation> {
    check_mu(mu)?;
    if g_clipped.is_empty() {
        return Err(invalid("gradient must have at least one cell"));
    }
    let each = mu * energy(g_clipped) / g_clipped.len() as f64;
    NoiseAllocation::new(vec![each; g_clipped.len()])
}

/// Allocation induced by a plane.
pub fn plane_allocation(g_clipped: &[f64], grid: &GridSpec, plane: &PlaneParams) -> Result<NoiseAllocation> {
    check_len(g_clipped, grid)?;
    let v = g_clipped
        .iter()
        .enumerate()
        .map(|(m, g)| {
            let c = grid.center_of(m);
            (plane.r * (plane.u[0] * c[0] + plane.u[1] * c[1]) + plane.b - g * g).max(0.0)
        })
        .collect();
    NoiseAllocation::new(v)
}

/// Offset `b` at which the plane `(u, r)` spends exactly the budget
/// `mu * sum G^2`.
pub fn solve_offset(g_clipped: &[f64], grid: &GridSpec, u: Point2, r: f64, mu: f64) -> Result<f64> {
    check_len(g_clipped, grid)?;
    check_mu(mu)?;
    let g2: Vec<f64> = g_clipped.iter().map(|g| g * g).collect();
    let total: f64 = g2.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateBudget);
    }
    let s: Vec<f64> = g2
        .iter()
        .enumerate()
        .map(|(m, g2)| {
            let c = grid.center_of(m);
            r * (u[0] * c[0] + u[1] * c[1]) - g2
        })
        .collect();
    Ok(offset_root(&s, mu * total))
}

/// Root in `b` of `sum_m max(0, s_m + b) = target`.
///
/// The left side is convex, piecewise linear and non-decreasing, so Newton
/// steps started from the upper bracket end approach the root from above
/// and land on it once they reach the right linear piece. Bisection takes
/// over whenever a step would leave the bracket.
pub(crate) fn offset_root(s: &[f64], target: f64) -> f64 {
    let (mut s_min, mut s_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in s {
        s_min = s_min.min(v);
        s_max = s_max.max(v);
    }
    if target <= 0.0 {
        return -s_max;
    }
    let mut lo = -s_max - target;
    let mut hi = -s_min + target;
    let mut b = hi;
    let tol = 1e-14 * target;
    for _ in 0..500 {
        let (mut f, mut k) = (0.0, 0usize);
        for &v in s {
            let x = v + b;
            if x > 0.0 {
                f += x;
                k += 1;
            }
        }
        let resid = f - target;
        if resid.abs() <= tol {
            return b;
        }
        if resid > 0.0 {
            hi = b;
        } else {
            lo = b;
        }
        let next = if k > 0 { b - resid / k as f64 } else { f64::NAN };
        b = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= 4.0 * f64::EPSILON * b.abs().max(1e-300) {
            break;
        }
    }
    b
}

/// Independent `n_m ~ N(0, sigma_m^2)`. One standard normal is drawn per
/// cell regardless of its variance.
pub fn sample_noise<R: Rng + ?Sized>(sigma: &NoiseAllocation, rng: &mut R) -> Vec<f64> {
    sigma
        .variances
        .iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v.sqrt() * z
        })
        .collect()
}

/// Summary of one privatized upload.
#[derive(Debug, Clone, PartialEq)]
pub struct Privatized {
    pub noisy: Vec<f64>,
    /// Optimizer trace for the geometry-aligned mechanism, empty otherwise.
    pub trace: Vec<f64>,
    pub fallback: bool,
}

/// Adds mechanism noise to a clipped gradient.
///
/// The allocation is computed on the gradient rescaled to unit energy and
/// the noise is scaled back afterwards, so gradients whose squared entries
/// underflow still receive correctly proportioned noise.
pub fn privatize<R: Rng + ?Sized>(
    g_clipped: &[f64],
    grid: &GridSpec,
    p_u: Point2,
    mechanism: Mechanism,
    mu: f64,
    config: &AllocatorConfig,
    rng: &mut R,
) -> Result<Privatized> {
    check_len(g_clipped, grid)?;
    check_mu(mu)?;
    let peak = g_clipped.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
    if mechanism == Mechanism::None || mu == 0.0 || peak == 0.0 {
        return Ok(Privatized { noisy: g_clipped.to_vec(), trace: Vec::new(), fallback: false });
    }
    let unit = allocator::UnitProblem::new(g_clipped, grid, p_u, peak);
    let (sigma, trace, fallback) = match mechanism {
        Mechanism::Uniform => (uniform_allocation(&unit.g, mu)?, Vec::new(), false),
        _ => {
            let res = unit.optimize(mu, config)?;
            (res.allocation, res.trace, res.fallback)
        }
    };
    let noise = sample_noise(&sigma, rng);
    let noisy = g_clipped
        .iter()
        .zip(&noise)
        .map(|(g, n)| g + unit.scale * n)
        .collect();
    Ok(Privatized { noisy, trace, fallback })
}

/// Writes `cell_index,cx,cy,g2_clipped,sigma2` rows.
pub fn write_allocation_csv<W: Write>(
    writer: W,
    grid: &GridSpec,
    g_clipped: &[f64],
    sigma: &NoiseAllocation,
) -> Result<()> {
    check_len(g_clipped, grid)?;
    if sigma.len() != g_clipped.len() {
        return Err(invalid("allocation length differs from gradient length"));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cell_index", "cx", "cy", "g2_clipped", "sigma2"])?;
    for (m, (g, s)) in g_clipped.iter().zip(sigma.variances()).enumerate() {
        let c = grid.center_of(m);
        w.write_record([
            m.to_string(),
            c[0].to_string(),
            c[1].to_string(),
            (g * g).to_string(),
            s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(invalid(format!("noise budget ratio must be non-negative, got {mu}")));
    }
    Ok(())
}

fn check_len(g: &[f64], grid: &GridSpec) -> Result<()> {
    if g.len() != grid.num_cells() {
        return Err(invalid(format!(
            "gradient has {} entries, grid has {} cells",
            g.len(),
            grid.num_cells()
        )));
    }
    Ok(())
}
