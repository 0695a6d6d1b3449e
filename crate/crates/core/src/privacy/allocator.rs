//! Nested numeric-gradient ascent over plane parameters.
//!
//! The search runs on a rescaled copy of the problem: cell coordinates are
//! mapped into the unit square (divided by the longer side of the area) and
//! the clipped gradient is rescaled to unit energy. Default step sizes and
//! tolerances are expressed in these units, and the objective trace reports
//! `J` in them as well.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{GridSpec, Point2};

use super::objective::{centroid_offset, combine_p};
use super::{check_len, check_mu, offset_root, NoiseAllocation, PlaneParams};

/// Settings of the geometry-aligned allocator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    /// Weight of the spatial-variance penalty.
    pub rho: f64,
    /// Initial slope and upper bound on the slope. `None` picks
    /// [`default_r_max`].
    pub r_max: Option<f64>,
    /// Finite-difference half-step.
    pub eps: f64,
    pub tau_r: f64,
    pub tau_u: f64,
    /// Ascent step on `r`; `None` means `0.1 * r_max`.
    pub step_r: Option<f64>,
    pub step_u: f64,
    pub max_inner: usize,
    pub max_outer: usize,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            r_max: None,
            eps: 1e-4,
            tau_r: 1e-4,
            tau_u: 1e-4,
            step_r: None,
            step_u: 0.05,
            max_inner: 100,
            max_outer: 100,
        }
    }
}

impl AllocatorConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self { rho, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("allocator {name} must be positive, got {v}")))
            }
        };
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(invalid(format!("rho must be non-negative, got {}", self.rho)));
        }
        if let Some(r) = self.r_max {
            positive("r_max", r)?;
        }
        if let Some(s) = self.step_r {
            positive("step_r", s)?;
        }
        positive("eps", self.eps)?;
        positive("tau_r", self.tau_r)?;
        positive("tau_u", self.tau_u)?;
        positive("step_u", self.step_u)?;
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(invalid("allocator iteration caps must be at least 1"));
        }
        Ok(())
    }
}

/// Default slope bound for a unit-energy squared gradient: ten times its
/// dynamic range, or `10 / M` for a flat one.
pub fn default_r_max(g2_unit: &[f64]) -> f64 {
    let (lo, hi) = g2_unit
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range > 0.0 {
        10.0 * range
    } else {
        10.0 / g2_unit.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    /// Optimized plane; `None` when the uniform fallback was used.
    pub plane: Option<PlaneParams>,
    pub allocation: NoiseAllocation,
    /// Objective after initialization and after every accepted step.
    pub trace: Vec<f64>,
    /// Set when the gradient centroid coincides with the user and the
    /// uniform allocation was returned instead.
    pub fallback: bool,
    pub evaluations: usize,
}

impl AllocationResult {
    pub fn initial_objective(&self) -> Option<f64> {
        self.trace.first().copied()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.trace.last().copied()
    }
}

/// Geometry-aligned allocation for one clipped gradient.
///
/// Starts from `u = dg / |dg|` and `r = r_max`; the inner loop ascends in
/// `r` within `[0, r_max]`, the outer loop ascends in `u` and renormalizes
/// it. `b` is re-solved for every evaluation so the budget is always spent
/// exactly. Steps that would lower `J` are halved until they do not, so the
/// trace is non-decreasing; a step accepted at full length doubles the next
/// one. The outer loop stops when the component of the
/// `u`-gradient tangent to the unit circle drops below `tau_u`.
pub fn optimize_allocation(
    g_clipped: &[f64],
    grid: &GridSpec,
    p_u: Point2,
    mu: f64,
    config: &AllocatorConfig,
) -> Result<AllocationResult> {
    check_len(g_clipped, grid)?;
    check_mu(mu)?;
    let peak = g_clipped.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
    if peak == 0.0 {
        return Err(crate::error::Error::DegenerateBudget);
    }
    let unit = UnitProblem::new(g_clipped, grid, p_u, peak);
    let res = unit.optimize(mu, config)?;
    let s2 = unit.scale * unit.scale;
    let plane = match res.plane {
        Some(p) => {
            let o = grid.origin();
            let u = p.u();
            let r = s2 * p.r() / unit.side;
            let b = s2 * (p.b() - p.r() * (u[0] * o[0] + u[1] * o[1]) / unit.side);
            Some(PlaneParams::new(u, r, b)?)
        }
        None => None,
    };
    let allocation = NoiseAllocation::new(res.allocation.variances().iter().map(|v| s2 * v).collect())?;
    Ok(AllocationResult { plane, allocation, ..res })
}

/// The problem rescaled to a unit-square grid and a unit-energy gradient,
/// with `g = scale * g_unit`.
pub(crate) struct UnitProblem {
    pub g: Vec<f64>,
    pub scale: f64,
    pub side: f64,
    grid: GridSpec,
    p: Point2,
}

impl UnitProblem {
    pub fn new(g_clipped: &[f64], grid: &GridSpec, p_u: Point2, peak: f64) -> Self {
        let w: Vec<f64> = g_clipped.iter().map(|g| g / peak).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let side = grid.width().max(grid.height());
        let o = grid.origin();
        let unit_grid = GridSpec::new([0.0, 0.0], grid.cell_size() / side, grid.nx(), grid.ny())
            .expect("rescaled grid stays valid");
        Self {
            g: w.iter().map(|v| v / norm).collect(),
            scale: peak * norm,
            side,
            grid: unit_grid,
            p: [(p_u[0] - o[0]) / side, (p_u[1] - o[1]) / side],
        }
    }

    pub fn optimize(&self, mu: f64, config: &AllocatorConfig) -> Result<AllocationResult> {
        config.validate()?;
        let m = self.g.len();
        let g2: Vec<f64> = self.g.iter().map(|v| v * v).collect();
        let dg = centroid_offset(&g2, &self.grid, self.p).expect("unit gradient has energy");
        let dg_norm = dg[0].hypot(dg[1]);
        let mut ev = Evaluator::new(&self.grid, &g2, self.p, dg, mu, config.rho);

        if mu == 0.0 {
            let u = if dg_norm > 0.0 { [dg[0] / dg_norm, dg[1] / dg_norm] } else { [1.0, 0.0] };
            let (j, b) = ev.eval([0.0, 0.0]);
            return Ok(AllocationResult {
                plane: Some(PlaneParams::new(u, 0.0, b)?),
                allocation: NoiseAllocation::zeros(m),
                trace: vec![j],
                fallback: false,
                evaluations: ev.count,
            });
        }
        if dg_norm <= 1e-12 {
            log::warn!("gradient centroid sits on the user; using uniform noise");
            return Ok(AllocationResult {
                plane: None,
                allocation: NoiseAllocation::new(vec![mu / m as f64; m])?,
                trace: Vec::new(),
                fallback: true,
                evaluations: 0,
            });
        }

        let r_max = config.r_max.unwrap_or_else(|| default_r_max(&g2));
        let mut sr = config.step_r.unwrap_or(0.1 * r_max);
        let mut su = config.step_u;
        let eps = config.eps;
        let mut u = [dg[0] / dg_norm, dg[1] / dg_norm];
        let mut r = r_max;
        let mut j = ev.eval([r * u[0], r * u[1]]).0;
        let mut trace = vec![j];

        for _ in 0..config.max_outer {
            for _ in 0..config.max_inner {
                let jp = ev.eval([(r + eps) * u[0], (r + eps) * u[1]]).0;
                let jm = ev.eval([(r - eps) * u[0], (r - eps) * u[1]]).0;
                let grad = (jp - jm) / (2.0 * eps);
                if grad.abs() <= config.tau_r {
                    break;
                }
                let mut step = sr;
                let mut moved = false;
                for k in 0..40 {
                    let cand = (r + step * grad).clamp(0.0, r_max);
                    if cand == r {
                        break;
                    }
                    let jc = ev.eval([cand * u[0], cand * u[1]]).0;
                    if jc >= j {
                        r = cand;
                        j = jc;
                        moved = true;
                        trace.push(j);
                        sr = if k == 0 { 2.0 * step } else { step };
                        break;
                    }
                    step *= 0.5;
                }
                if !moved {
                    break;
                }
            }

            let mut gu = [0.0; 2];
            for (k, gk) in gu.iter_mut().enumerate() {
                let mut plus = u;
                let mut minus = u;
                plus[k] += eps;
                minus[k] -= eps;
                let jp = ev.eval([r * plus[0], r * plus[1]]).0;
                let jm = ev.eval([r * minus[0], r * minus[1]]).0;
                *gk = (jp - jm) / (2.0 * eps);
            }
            let radial = gu[0] * u[0] + gu[1] * u[1];
            let tangential = [gu[0] - radial * u[0], gu[1] - radial * u[1]];
            if tangential[0].hypot(tangential[1]) <= config.tau_u {
                break;
            }
            let mut step = su;
            let mut moved = false;
            for k in 0..40 {
                let raw = [u[0] + step * gu[0], u[1] + step * gu[1]];
                let n = raw[0].hypot(raw[1]);
                if n == 0.0 {
                    step *= 0.5;
                    continue;
                }
                let cand = [raw[0] / n, raw[1] / n];
                let jc = ev.eval([r * cand[0], r * cand[1]]).0;
                if jc >= j {
                    u = cand;
                    j = jc;
                    moved = true;
                    trace.push(j);
                    su = if k == 0 { 2.0 * step } else { step };
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }

        let (_, b) = ev.eval([r * u[0], r * u[1]]);
        let plane = PlaneParams::new(u, r, b)?;
        let allocation = NoiseAllocation::new(ev.sigma.clone())?;
        Ok(AllocationResult { plane: Some(plane), allocation, trace, fallback: false, evaluations: ev.count })
    }
}

/// Evaluates `J` for a slope vector `a = r u`, reusing scratch buffers.
struct Evaluator<'a> {
    xs: Vec<f64>,
    ys: Vec<f64>,
    g2: &'a [f64],
    target: f64,
    mu: f64,
    rho: f64,
    dg: Point2,
    p: Point2,
    s: Vec<f64>,
    sigma: Vec<f64>,
    count: usize,
}

impl<'a> Evaluator<'a> {
    fn new(grid: &GridSpec, g2: &'a [f64], p: Point2, dg: Point2, mu: f64, rho: f64) -> Self {
        let centers = grid.centers();
        Self {
            xs: centers.iter().map(|c| c[0]).collect(),
            ys: centers.iter().map(|c| c[1]).collect(),
            g2,
            target: mu * g2.iter().sum::<f64>(),
            mu,
            rho,
            dg,
            p,
            s: vec![0.0; g2.len()],
            sigma: vec![0.0; g2.len()],
            count: 0,
        }
    }

    fn eval(&mut self, a: [f64; 2]) -> (f64, f64) {
        self.count += 1;
        for m in 0..self.g2.len() {
            self.s[m] = a[0] * self.xs[m] + a[1] * self.ys[m] - self.g2[m];
        }
        let b = offset_root(&self.s, self.target);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for m in 0..self.g2.len() {
            let v = (self.s[m] + b).max(0.0);
            self.sigma[m] = v;
            sw += v;
            sx += v * self.xs[m];
            sy += v * self.ys[m];
        }
        let dn = if sw > 0.0 { [sx / sw - self.p[0], sy / sw - self.p[1]] } else { [0.0, 0.0] };
        let p = combine_p(self.dg, dn, self.mu);
        let v = if self.rho > 0.0 {
            super::objective::variance_from_parts(self.g2, &self.sigma)
        } else {
            0.0
        };
        (p - self.rho * v, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::{energy, objective_j, uniform_allocation};

    fn toy() -> (GridSpec, Vec<f64>, Point2) {
        let grid = GridSpec::new([0.0, 0.0], 0.2, 5, 5).unwrap();
        let p = [0.3, 0.5];
        let g: Vec<f64> = (0..25)
            .map(|m| {
                let c = grid.center_of(m);
                (-((c[0] - 0.25).powi(2) + (c[1] - 0.45).powi(2)) * 6.0).exp()
            })
            .collect();
        (grid, g, p)
    }

    #[test]
    fn zero_budget_gives_zero_noise() {
        let (grid, g, p) = toy();
        let res = optimize_allocation(&g, &grid, p, 0.0, &AllocatorConfig::default()).unwrap();
        assert!(res.allocation.variances().iter().all(|&v| v == 0.0));
        assert!(!res.fallback);
    }

    #[test]
    fn symmetric_gradient_falls_back_to_uniform() {
        let grid = GridSpec::new([0.0, 0.0], 1.0, 3, 3).unwrap();
        let g = [1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 1.0];
        let res = optimize_allocation(&g, &grid, [1.5, 1.5], 2.0, &AllocatorConfig::default()).unwrap();
        assert!(res.fallback);
        assert!(res.plane.is_none());
        let uni = uniform_allocation(&g, 2.0).unwrap();
        for (a, b) in res.allocation.variances().iter().zip(uni.variances()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn result_respects_budget_and_improves() {
        let (grid, g, p) = toy();
        for rho in [0.0, 1.0, 100.0] {
            let res = optimize_allocation(&g, &grid, p, 5.0, &AllocatorConfig::with_rho(rho)).unwrap();
            assert!(res.allocation.within_budget(&g, 5.0));
            let target = 5.0 * energy(&g);
            assert!(((res.allocation.total() - target) / target).abs() < 1e-8);
            assert!(res.final_objective().unwrap() >= res.initial_objective().unwrap() - 1e-9);
            assert!(res.trace.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn physical_plane_reproduces_allocation() {
        let (grid, g, p) = toy();
        let grid = GridSpec::new([10.0, -4.0], 7.0, grid.nx(), grid.ny()).unwrap();
        let p = [10.0 + 35.0 * p[0], -4.0 + 35.0 * p[1]];
        let g: Vec<f64> = g.iter().map(|v| v * 3e-3).collect();
        let res = optimize_allocation(&g, &grid, p, 4.0, &AllocatorConfig::default()).unwrap();
        let plane = res.plane.unwrap();
        let direct = crate::privacy::plane_allocation(&g, &grid, &plane).unwrap();
        let scale = res.allocation.total();
        for (a, b) in res.allocation.variances().iter().zip(direct.variances()) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
        let j = objective_j(&g, &grid, p, 4.0, 0.0, &plane).unwrap();
        assert!(j.is_finite());
    }
}
