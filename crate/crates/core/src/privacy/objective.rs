//! Closed-form localization error `P`, spatial variance `V` and the
//! allocator objective `J = P - rho V`.

use crate::error::{invalid, Error, Result};
use crate::geometry::{GridSpec, Point2};

use super::{check_len, check_mu, plane_allocation, NoiseAllocation, PlaneParams};

/// Weighted centroid of the cell centers minus `p`; `None` for zero weight.
pub(crate) fn centroid_offset(weights: &[f64], grid: &GridSpec, p: Point2) -> Option<Point2> {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (m, w) in weights.iter().enumerate() {
        let c = grid.center_of(m);
        sx += w * c[0];
        sy += w * c[1];
        sw += w;
    }
    (sw > 0.0).then(|| [sx / sw - p[0], sy / sw - p[1]])
}

/// Asymptotic mean squared error of the squared-weight centroid attack
/// under noise allocation `sigma`:
/// `P = ||dg + mu dn||^2 / (1 + mu)^2`, where `dg` and `dn` are the offsets
/// of the gradient-energy and noise-variance centroids from `p_u`.
///
/// An all-zero allocation contributes `dn = 0`.
pub fn localization_error_p(
    g_clipped: &[f64],
    sigma: &NoiseAllocation,
    grid: &GridSpec,
    p_u: Point2,
    mu: f64,
) -> Result<f64> {
    check_len(g_clipped, grid)?;
    check_mu(mu)?;
    if sigma.len() != g_clipped.len() {
        return Err(invalid("allocation length differs from gradient length"));
    }
    let g2: Vec<f64> = g_clipped.iter().map(|g| g * g).collect();
    let dg = centroid_offset(&g2, grid, p_u).ok_or(Error::DegenerateBudget)?;
    let dn = centroid_offset(sigma.variances(), grid, p_u).unwrap_or([0.0, 0.0]);
    Ok(combine_p(dg, dn, mu))
}

pub(crate) fn combine_p(dg: Point2, dn: Point2, mu: f64) -> f64 {
    let ex = dg[0] + mu * dn[0];
    let ey = dg[1] + mu * dn[1];
    (ex * ex + ey * ey) / ((1.0 + mu) * (1.0 + mu))
}

/// Expected sample variance of the squared noisy components
/// `X_m = (G_m + n_m)^2`.
///
/// With `a_m = E X_m = G_m^2 + sigma_m^2` and
/// `v_m = Var X_m = 4 G_m^2 sigma_m^2 + 2 sigma_m^4`, independence gives
/// `E[(1/M) sum X_m^2] = (1/M) sum (a_m^2 + v_m)` and
/// `E[Xbar^2] = abar^2 + (1/M^2) sum v_m`, so
/// `V = popvar(a) + (M - 1)/M^2 * sum v_m`.
pub fn spatial_variance_v(g_clipped: &[f64], sigma: &NoiseAllocation) -> Result<f64> {
    if g_clipped.len() < 2 {
        return Err(invalid("spatial variance needs at least two cells"));
    }
    if sigma.len() != g_clipped.len() {
        return Err(invalid("allocation length differs from gradient length"));
    }
    let g2: Vec<f64> = g_clipped.iter().map(|g| g * g).collect();
    Ok(variance_from_parts(&g2, sigma.variances()))
}

pub(crate) fn variance_from_parts(g2: &[f64], s2: &[f64]) -> f64 {
    let m = g2.len() as f64;
    let mean_a = g2.iter().zip(s2).map(|(g, s)| g + s).sum::<f64>() / m;
    let (mut var_a, mut sum_v) = (0.0, 0.0);
    for (g, s) in g2.iter().zip(s2) {
        let d = g + s - mean_a;
        var_a += d * d;
        sum_v += 4.0 * g * s + 2.0 * s * s;
    }
    var_a / m + (m - 1.0) / (m * m) * sum_v
}

/// `J = P - rho V` on the allocation induced by `plane`.
pub fn objective_j(
    g_clipped: &[f64],
    grid: &GridSpec,
    p_u: Point2,
    mu: f64,
    rho: f64,
    plane: &PlaneParams,
) -> Result<f64> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(invalid(format!("rho must be non-negative, got {rho}")));
    }
    let sigma = plane_allocation(g_clipped, grid, plane)?;
    let p = localization_error_p(g_clipped, &sigma, grid, p_u, mu)?;
    let v = spatial_variance_v(g_clipped, &sigma)?;
    Ok(p - rho * v)
}
