//! Monte Carlo checks of the gradient-attenuation and localization-error
//! results, plus finite-sample estimates of the smoothness constants.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::fed_engine::{norm, UserDataset};
use crate::geometry::{GridSpec, Point2};
use crate::privacy::{localization_error_p, NoiseAllocation};
use crate::radio_model::{ln_psi, ChannelModel, ObstacleMap, PropagationParams};
use crate::rng;

use super::scenario::Scenario;

/// Ray directions in cell-index steps `(dcol, drow)`.
pub const DIRECTIONS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttenuationReport {
    /// Adjacent pairs along the rays where both cells carry gradient energy.
    pub pairs: usize,
    /// Pairs whose inner cell has at least the energy of the outer one.
    pub ordered: usize,
    /// `ordered / pairs`, or 1 when no pair qualifies.
    pub fraction: f64,
    pub n_mc: usize,
}

/// Estimates `ln E{G_m^2}` for every user and cell over `n_mc` redraws of
/// the measurement noise, then walks eight rays out of each user's cell and
/// counts adjacent pairs whose energy does not increase outward.
///
/// Each cell's gradient is a sum of per-sample terms whose magnitudes can
/// differ by hundreds of orders of magnitude, so the terms are rescaled by
/// the largest one per cell and the estimate is kept as a logarithm.
pub fn verify_gradient_attenuation(
    scenario: &Scenario,
    model: &ChannelModel,
    h: &ObstacleMap,
    theta: &PropagationParams,
    n_mc: usize,
    seed: u64,
) -> Result<AttenuationReport> {
    if n_mc == 0 {
        return Err(invalid("n_mc must be positive"));
    }
    let grid = scenario.grid;
    let (mut pairs, mut ordered) = (0, 0);
    for user in &scenario.users {
        let ln_e = user_log_energy(scenario, model, user, h, theta, n_mc, seed)?;
        let start = grid
            .locate([user.p_u[0], user.p_u[1]])
            .ok_or_else(|| invalid(format!("user {} is outside the grid", user.user_id)))?;
        let (r0, c0) = grid.row_col(start);
        for (dc, dr) in DIRECTIONS {
            let (mut r, mut c) = (r0 as i64, c0 as i64);
            loop {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= grid.ny() as i64 || nc >= grid.nx() as i64 {
                    break;
                }
                let inner = ln_e[grid.index(r as usize, c as usize)];
                let outer = ln_e[grid.index(nr as usize, nc as usize)];
                if let (Some(a), Some(b)) = (inner, outer) {
                    pairs += 1;
                    if a >= b {
                        ordered += 1;
                    }
                }
                r = nr;
                c = nc;
            }
        }
    }
    let fraction = if pairs == 0 { 1.0 } else { ordered as f64 / pairs as f64 };
    Ok(AttenuationReport { pairs, ordered, fraction, n_mc })
}

fn user_log_energy(
    scenario: &Scenario,
    model: &ChannelModel,
    user: &UserDataset,
    h: &ObstacleMap,
    theta: &PropagationParams,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let m_cells = model.grid.num_cells();
    let hv = h.heights();
    let j = user.samples.len() as f64;
    let kappa = model.sharpness;
    // (sample, ln|term|, sign) per cell
    let mut terms: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); m_cells];
    let mut residual = Vec::with_capacity(user.samples.len());
    for (k, s) in user.samples.iter().enumerate() {
        let label = scenario.config.labeler.gain(&scenario.grid, &s.link, &scenario.theta_true, &scenario.h_true)?;
        let p = model.prepare_link(&s.link);
        residual.push(label - model.gain_prepared(&p, theta, hv));
        let ld = p.log10_distance();
        let gap = theta.los_gain(ld) - theta.nlos_gain(ld);
        if gap == 0.0 {
            continue;
        }
        let cells: Vec<(usize, f64)> = {
            let t = crate::geometry::traverse(&model.grid, &s.link);
            t.cells.iter().map(|c| (c.cell, c.z)).collect()
        };
        let ln_s: f64 = cells.iter().map(|&(m, z)| ln_psi(kappa * (z - hv[m]))).sum();
        let base = (2.0 / j).ln() + gap.abs().ln() + kappa.ln() + ln_s;
        for &(m, z) in &cells {
            terms[m].push((k, base + ln_psi(-kappa * (z - hv[m])), gap.signum()));
        }
    }
    let scales: Vec<f64> = terms
        .iter()
        .map(|t| t.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.1)))
        .collect();
    let weights: Vec<Vec<(usize, f64)>> = terms
        .iter()
        .zip(&scales)
        .map(|(t, s)| t.iter().map(|&(k, l, sg)| (k, sg * (l - s).exp())).collect())
        .collect();
    let mut rng = rng::stream(seed, &[rng::purpose::MONTE_CARLO, user.user_id as u64]);
    let std = scenario.config.noise_std;
    let mut acc = vec![0.0; m_cells];
    let mut y = vec![0.0; residual.len()];
    for _ in 0..n_mc {
        for (yk, r) in y.iter_mut().zip(&residual) {
            let z: f64 = rng.sample(StandardNormal);
            *yk = r + std * z;
        }
        for (m, w) in weights.iter().enumerate() {
            if w.is_empty() {
                continue;
            }
            let g: f64 = w.iter().map(|&(k, c)| y[k] * c).sum();
            acc[m] += g * g;
        }
    }
    Ok(acc
        .iter()
        .zip(&scales)
        .map(|(a, s)| (*a > 0.0).then(|| 2.0 * s + (a / n_mc as f64).ln()))
        .collect())
}

/// Continuous gradient and noise profiles on the unit square.
pub trait Profile: Sync {
    fn value(&self, p: Point2) -> f64;
}

impl<F: Fn(Point2) -> f64 + Sync> Profile for F {
    fn value(&self, p: Point2) -> f64 {
        self(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasVariancePoint {
    pub cells: usize,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasVarianceReport {
    pub points: Vec<BiasVariancePoint>,
}

impl BiasVarianceReport {
    /// Number of times the relative error grows from one grid to the next.
    pub fn inversions(&self) -> usize {
        self.points.windows(2).filter(|w| w[1].rel_error > w[0].rel_error).count()
    }
}

/// Rasterizes `g_profile` (gradient magnitude) and `noise_profile` (noise
/// variance shape, rescaled to spend `mu * sum G^2`) on `n x n` unit-square
/// grids for each `n` in `sides`, and compares the closed-form `P` with the
/// Monte Carlo mean of `||p~ - p_u||^2` for the squared-weight centroid.
///
/// Every grid uses `seeds` independent streams of `draws` noise draws each.
#[allow(clippy::too_many_arguments)]
pub fn verify_bias_variance(
    g_profile: &dyn Profile,
    noise_profile: &dyn Profile,
    p_u: Point2,
    mu: f64,
    sides: &[usize],
    seeds: u64,
    draws: usize,
    seed: u64,
) -> Result<BiasVarianceReport> {
    if draws == 0 || seeds == 0 {
        return Err(invalid("need at least one draw and one seed"));
    }
    let mut points = Vec::with_capacity(sides.len());
    for &n in sides {
        let grid = GridSpec::new([0.0, 0.0], 1.0 / n as f64, n, n)?;
        let centers = grid.centers();
        let g: Vec<f64> = centers.iter().map(|&c| g_profile.value(c)).collect();
        let shape: Vec<f64> = centers.iter().map(|&c| noise_profile.value(c).max(0.0)).collect();
        let energy: f64 = g.iter().map(|v| v * v).sum();
        let total: f64 = shape.iter().sum();
        let sigma = if total > 0.0 {
            NoiseAllocation::new(shape.iter().map(|s| mu * energy * s / total).collect())?
        } else {
            NoiseAllocation::zeros(g.len())
        };
        let closed = localization_error_p(&g, &sigma, &grid, p_u, mu)?;
        let std: Vec<f64> = sigma.variances().iter().map(|v| v.sqrt()).collect();
        let mut sum = 0.0;
        for s in 0..seeds {
            let mut rng = rng::stream(seed, &[rng::purpose::MONTE_CARLO, n as u64, s]);
            for _ in 0..draws {
                let (mut wx, mut wy, mut w) = (0.0, 0.0, 0.0);
                for ((gm, sm), c) in g.iter().zip(&std).zip(&centers) {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = gm + sm * z;
                    let v2 = v * v;
                    wx += v2 * c[0];
                    wy += v2 * c[1];
                    w += v2;
                }
                sum += (wx / w - p_u[0]).powi(2) + (wy / w - p_u[1]).powi(2);
            }
        }
        let mc = sum / (seeds as f64 * draws as f64);
        points.push(BiasVariancePoint {
            cells: n * n,
            closed_form: closed,
            monte_carlo: mc,
            rel_error: (mc - closed).abs() / closed,
        });
    }
    Ok(BiasVarianceReport { points })
}

/// Finite-sample estimates of the smoothness constant `L` and the local
/// dissimilarity `B` around `(theta, h)`.
///
/// `L` is the largest ratio `||grad F(x + d) - grad F(x)|| / ||d||` over
/// `probes` random perturbations of size `step` in the joint `(h, theta)`
/// space; `B` is `max_i ||g_i|| / ||g||` at the unperturbed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothnessEstimate {
    pub l: f64,
    pub b: f64,
}

pub fn estimate_constants(
    users: &[UserDataset],
    model: &ChannelModel,
    h: &ObstacleMap,
    theta: &PropagationParams,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    if users.is_empty() || probes == 0 || !(step > 0.0) {
        return Err(invalid("need users, probes and a positive step"));
    }
    let prepared: Vec<_> = users.iter().map(|u| model.prepare(u)).collect();
    let total: f64 = users.iter().map(|u| u.len() as f64).sum();
    let joint = |th: &PropagationParams, hv: &[f64]| -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut global = vec![0.0; hv.len() + 4];
        let mut locals = Vec::with_capacity(users.len());
        for (p, u) in prepared.iter().zip(users) {
            let ev = model.evaluate(p, th, hv);
            let w = u.len() as f64 / total;
            for (gm, v) in global.iter_mut().zip(ev.grad_h.iter().chain(ev.grad_theta.iter())) {
                *gm += w * v;
            }
            locals.push(ev.grad_h);
        }
        (global, locals)
    };
    let (g0, locals) = joint(theta, h.heights());
    let gh = &g0[..h.len()];
    let gnorm = norm(gh);
    let b = if gnorm > 0.0 {
        locals.iter().map(|l| norm(l) / gnorm).fold(1.0_f64, f64::max)
    } else {
        1.0
    };
    let mut rng = rng::stream(seed, &[rng::purpose::MONTE_CARLO]);
    let mut l = 0.0_f64;
    for _ in 0..probes {
        let d: Vec<f64> = (0..g0.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dn = norm(&d);
        let d: Vec<f64> = d.iter().map(|v| v * step / dn).collect();
        let hp: Vec<f64> = h.heights().iter().zip(&d).map(|(a, b)| a + b).collect();
        let t = theta.to_array();
        let tp = PropagationParams::from_array([t[0] + d[h.len()], t[1] + d[h.len() + 1], t[2] + d[h.len() + 2], t[3] + d[h.len() + 3]]);
        let (g1, _) = joint(&tp, &hp);
        let diff: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
        l = l.max(norm(&diff) / step);
    }
    Ok(SmoothnessEstimate { l, b })
}
