//! Smoothed virtual-obstacle channel model.
//!
//! The channel gain of a link is a convex mix of a LOS and an NLOS
//! log-distance law, weighted by a soft LOS indicator
//! `S = prod_m psi(kappa * (z_m - h_m))` over the cells underneath the link.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fed_engine::UserDataset;
use crate::geometry::{link_distance, traverse, GridSpec, Link};

/// Logistic function `1 / (1 + e^-x)`, evaluated without overflow.
pub fn psi(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln psi(x)`, accurate for large negative `x`.
pub fn ln_psi(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log-distance coefficients `(alpha0, beta0)` for LOS and `(alpha1, beta1)`
/// for NLOS, in dB per decade and dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    pub alpha0: f64,
    pub beta0: f64,
    pub alpha1: f64,
    pub beta1: f64,
}

impl PropagationParams {
    pub fn new(alpha0: f64, beta0: f64, alpha1: f64, beta1: f64) -> Self {
        Self { alpha0, beta0, alpha1, beta1 }
    }

    /// Parameters as `[alpha0, beta0, alpha1, beta1]`.
    pub fn to_array(self) -> [f64; 4] {
        [self.alpha0, self.beta0, self.alpha1, self.beta1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn los_gain(&self, log10_d: f64) -> f64 {
        self.beta0 + self.alpha0 * log10_d
    }

    pub fn nlos_gain(&self, log10_d: f64) -> f64 {
        self.beta1 + self.alpha1 * log10_d
    }
}

/// Per-cell virtual obstacle heights `h` (m), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleMap {
    heights: Vec<f64>,
}

impl ObstacleMap {
    pub fn new(heights: Vec<f64>) -> Result<Self> {
        if heights.is_empty() {
            return Err(invalid("obstacle map must have at least one cell"));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(invalid("obstacle heights must be finite"));
        }
        Ok(Self { heights })
    }

    pub fn filled(num_cells: usize, height: f64) -> Result<Self> {
        Self::new(vec![height; num_cells])
    }

    /// Checks that the map matches `grid`.
    pub fn for_grid(self, grid: &GridSpec) -> Result<Self> {
        if self.heights.len() != grid.num_cells() {
            return Err(invalid(format!(
                "obstacle map has {} cells, grid has {}",
                self.heights.len(),
                grid.num_cells()
            )));
        }
        Ok(self)
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn heights_mut(&mut self) -> &mut [f64] {
        &mut self.heights
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.heights
    }
}

/// One labelled RSS sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub link: Link,
    /// Observed RSS (dB).
    pub y: f64,
}

/// A link with its traversal and distance cached.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedLink {
    cells: Vec<(usize, f64)>,
    log10_d: f64,
}

impl PreparedLink {
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().map(|&(m, _)| m)
    }

    pub fn log10_distance(&self) -> f64 {
        self.log10_d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub link: PreparedLink,
    pub y: f64,
}

/// Loss and gradients of one local dataset at a model point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEvaluation {
    pub loss: f64,
    pub grad_h: Vec<f64>,
    pub grad_theta: [f64; 4],
}

/// The smoothed channel model on a fixed grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub grid: GridSpec,
    /// Logistic sharpness `kappa` (1/m).
    pub sharpness: f64,
}

impl ChannelModel {
    pub const DEFAULT_SHARPNESS: f64 = 1.0;

    pub fn new(grid: GridSpec, sharpness: f64) -> Result<Self> {
        if !(sharpness.is_finite() && sharpness > 0.0) {
            return Err(invalid(format!("sharpness must be positive, got {sharpness}")));
        }
        Ok(Self { grid, sharpness })
    }

    pub fn with_default_sharpness(grid: GridSpec) -> Self {
        Self { grid, sharpness: Self::DEFAULT_SHARPNESS }
    }

    fn check_map(&self, h: &ObstacleMap) -> Result<()> {
        if h.len() != self.grid.num_cells() {
            return Err(invalid(format!(
                "obstacle map has {} cells, grid has {}",
                h.len(),
                self.grid.num_cells()
            )));
        }
        Ok(())
    }

    pub fn prepare_link(&self, link: &Link) -> PreparedLink {
        let t = traverse(&self.grid, link);
        PreparedLink {
            cells: t.cells.iter().map(|c| (c.cell, c.z)).collect(),
            log10_d: link_distance(link).log10(),
        }
    }

    pub fn prepare(&self, dataset: &UserDataset) -> Vec<PreparedSample> {
        dataset
            .samples
            .iter()
            .map(|s| PreparedSample { link: self.prepare_link(&s.link), y: s.y })
            .collect()
    }

    fn ln_s(&self, link: &PreparedLink, h: &[f64]) -> f64 {
        link.cells.iter().map(|&(m, z)| ln_psi(self.sharpness * (z - h[m]))).sum()
    }

    /// Soft LOS indicator `S(p, h)`; 1 for a link that misses the grid.
    pub fn los_indicator(&self, link: &Link, h: &ObstacleMap) -> Result<f64> {
        self.check_map(h)?;
        Ok(self.ln_s(&self.prepare_link(link), h.heights()).exp())
    }

    /// Predicted channel gain (dB).
    pub fn gain(&self, link: &Link, theta: &PropagationParams, h: &ObstacleMap) -> Result<f64> {
        self.check_map(h)?;
        Ok(self.gain_prepared(&self.prepare_link(link), theta, h.heights()))
    }

    pub fn gain_prepared(&self, link: &PreparedLink, theta: &PropagationParams, h: &[f64]) -> f64 {
        let s = self.ln_s(link, h).exp();
        let los = theta.los_gain(link.log10_d);
        let nlos = theta.nlos_gain(link.log10_d);
        nlos + (los - nlos) * s
    }

    /// Hard LOS/NLOS gain: LOS iff every traversed obstacle is strictly
    /// below the link.
    pub fn segmented_gain(&self, link: &Link, theta: &PropagationParams, h: &ObstacleMap) -> Result<f64> {
        self.check_map(h)?;
        let p = self.prepare_link(link);
        let blocked = p.cells.iter().any(|&(m, z)| h.heights()[m] >= z);
        Ok(if blocked { theta.nlos_gain(p.log10_d) } else { theta.los_gain(p.log10_d) })
    }

    /// `y = gain + xi`, `xi ~ N(0, noise_std^2)`.
    pub fn synthesize_measurement<R: Rng + ?Sized>(
        &self,
        link: &Link,
        theta_true: &PropagationParams,
        h_true: &ObstacleMap,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<Measurement> {
        let g = self.gain(link, theta_true, h_true)?;
        Ok(Measurement { link: *link, y: g + gaussian(noise_std, rng)? })
    }

    /// Local least-squares loss `F_i` (dB^2).
    pub fn local_loss(&self, dataset: &UserDataset, theta: &PropagationParams, h: &ObstacleMap) -> Result<f64> {
        check_nonempty(dataset)?;
        self.check_map(h)?;
        Ok(self.loss_prepared(&self.prepare(dataset), theta, h.heights()))
    }

    pub fn loss_prepared(&self, samples: &[PreparedSample], theta: &PropagationParams, h: &[f64]) -> f64 {
        let sum: f64 = samples
            .iter()
            .map(|s| (s.y - self.gain_prepared(&s.link, theta, h)).powi(2))
            .sum();
        sum / samples.len() as f64
    }

    /// Gradient of `F_i` with respect to the obstacle heights.
    pub fn grad_h(&self, dataset: &UserDataset, theta: &PropagationParams, h: &ObstacleMap) -> Result<Vec<f64>> {
        check_nonempty(dataset)?;
        self.check_map(h)?;
        Ok(self.evaluate(&self.prepare(dataset), theta, h.heights()).grad_h)
    }

    /// Gradient of `F_i` with respect to `[alpha0, beta0, alpha1, beta1]`.
    pub fn grad_theta(&self, dataset: &UserDataset, theta: &PropagationParams, h: &ObstacleMap) -> Result<[f64; 4]> {
        check_nonempty(dataset)?;
        self.check_map(h)?;
        Ok(self.evaluate(&self.prepare(dataset), theta, h.heights()).grad_theta)
    }

    /// Loss and both gradients in a single pass over prepared samples.
    ///
    /// With residual `e = y - gamma` and `dS/dh_m = -kappa * S * (1 - psi_m)`,
    /// `dF/dh_m = (2/J) sum e * (LOS - NLOS) * kappa * S * (1 - psi_m)`.
    pub fn evaluate(&self, samples: &[PreparedSample], theta: &PropagationParams, h: &[f64]) -> LocalEvaluation {
        let mut grad_h = vec![0.0; self.grid.num_cells()];
        let mut grad_theta = [0.0; 4];
        let mut loss = 0.0;
        let scale = 2.0 / samples.len() as f64;
        for s in samples {
            let ld = s.link.log10_d;
            let s_los = self.ln_s(&s.link, h).exp();
            let los = theta.los_gain(ld);
            let nlos = theta.nlos_gain(ld);
            let e = s.y - (nlos + (los - nlos) * s_los);
            loss += e * e;
            grad_theta[0] -= scale * e * ld * s_los;
            grad_theta[1] -= scale * e * s_los;
            grad_theta[2] -= scale * e * ld * (1.0 - s_los);
            grad_theta[3] -= scale * e * (1.0 - s_los);
            let common = scale * e * (los - nlos) * self.sharpness * s_los;
            if common == 0.0 {
                continue;
            }
            for &(m, z) in &s.link.cells {
                grad_h[m] += common * psi(-self.sharpness * (z - h[m]));
            }
        }
        LocalEvaluation { loss: loss / samples.len() as f64, grad_h, grad_theta }
    }
}

fn check_nonempty(dataset: &UserDataset) -> Result<()> {
    if dataset.samples.is_empty() {
        return Err(invalid(format!("dataset of user {} is empty", dataset.user_id)));
    }
    Ok(())
}

pub(crate) fn gaussian<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Result<f64> {
    if !(std.is_finite() && std >= 0.0) {
        return Err(invalid(format!("noise std must be non-negative, got {std}")));
    }
    if std == 0.0 {
        return Ok(0.0);
    }
    let n = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
    Ok(n.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn grid3() -> GridSpec {
        GridSpec::new([0.0, 0.0], 10.0, 3, 3).unwrap()
    }

    fn dataset(samples: Vec<Measurement>) -> UserDataset {
        let p_u = samples[0].link.user();
        UserDataset::new(0, p_u, samples).unwrap()
    }

    #[test]
    fn psi_examples() {
        assert_eq!(psi(0.0), 0.5);
        for x in [-30.0, -2.5, 0.3, 7.0, 699.0] {
            assert!((psi(x) + psi(-x) - 1.0).abs() < 1e-15);
        }
        assert!((psi(50.0) - 1.0).abs() < 1e-15);
        assert!(psi(-700.0) > 0.0);
        assert!((ln_psi(-700.0) + 700.0).abs() < 1e-9);
        assert!((ln_psi(1.3) - psi(1.3).ln()).abs() < 1e-15);
    }

    #[test]
    fn gain_limits() {
        let g = grid3();
        let model = ChannelModel::with_default_sharpness(g);
        let theta = PropagationParams::new(-20.0, -30.0, -40.0, -40.0);
        let low = ObstacleMap::filled(9, -1000.0).unwrap();
        let link = Link::new([0.0, 5.0, 100.0], [0.0, 5.0, 0.0]).unwrap();
        let gamma = model.gain(&link, &theta, &low).unwrap();
        assert!((gamma + 70.0).abs() < 1e-9);

        let high = ObstacleMap::filled(9, 1000.0).unwrap();
        let link = Link::new([5.0, 5.0, 0.0], [5.0, 5.0, 10.0]).unwrap();
        assert!((model.gain(&link, &theta, &high).unwrap() + 80.0).abs() < 1e-9);
    }

    #[test]
    fn single_cell_at_link_height_gives_half() {
        let model = ChannelModel::with_default_sharpness(grid3());
        let link = Link::new([15.0, 15.0, 0.0], [15.0, 15.0, 20.0]).unwrap();
        let mut h = ObstacleMap::filled(9, 0.0).unwrap();
        h.heights_mut()[4] = 10.0;
        assert!((model.los_indicator(&link, &h).unwrap() - 0.5).abs() < 1e-15);
        let theta = PropagationParams::new(-20.0, -30.0, -40.0, -40.0);
        let d = link_distance(&link).log10();
        let mean = 0.5 * (theta.los_gain(d) + theta.nlos_gain(d));
        assert!((model.gain(&link, &theta, &h).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn noiseless_measurement_equals_gain() {
        let model = ChannelModel::with_default_sharpness(grid3());
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let h = ObstacleMap::filled(9, 5.0).unwrap();
        let link = Link::new([1.0, 2.0, 1.5], [27.0, 24.0, 50.0]).unwrap();
        let mut r = rng::stream(1, &[]);
        let m = model.synthesize_measurement(&link, &theta, &h, 0.0, &mut r).unwrap();
        assert_eq!(m.y, model.gain(&link, &theta, &h).unwrap());
    }

    #[test]
    fn loss_of_single_residual() {
        let model = ChannelModel::with_default_sharpness(grid3());
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let h = ObstacleMap::filled(9, 5.0).unwrap();
        let link = Link::new([1.0, 2.0, 1.5], [27.0, 24.0, 50.0]).unwrap();
        let y = model.gain(&link, &theta, &h).unwrap() + 2.0;
        let ds = dataset(vec![Measurement { link, y }]);
        assert!((model.local_loss(&ds, &theta, &h).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = ChannelModel::with_default_sharpness(grid3());
        let ds = UserDataset { user_id: 3, p_u: [1.0, 1.0, 1.5], samples: vec![] };
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let h = ObstacleMap::filled(9, 5.0).unwrap();
        assert!(model.local_loss(&ds, &theta, &h).is_err());
        assert!(model.grad_h(&ds, &theta, &h).is_err());
        assert!(model.grad_theta(&ds, &theta, &h).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let model = ChannelModel::with_default_sharpness(grid3());
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let mut h = ObstacleMap::filled(9, 5.0).unwrap();
        h.heights_mut()[4] = 12.0;
        let links = [
            Link::new([1.0, 2.0, 1.5], [27.0, 24.0, 50.0]).unwrap(),
            Link::new([1.0, 2.0, 1.5], [3.0, 28.0, 50.0]).unwrap(),
        ];
        let samples: Vec<Measurement> = links
            .iter()
            .map(|l| Measurement { link: *l, y: model.gain(l, &theta, &h).unwrap() })
            .collect();
        let ds = dataset(samples);
        assert!(model.grad_h(&ds, &theta, &h).unwrap().iter().all(|&g| g == 0.0));
        assert!(model.grad_theta(&ds, &theta, &h).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn untouched_cells_get_no_gradient() {
        let model = ChannelModel::with_default_sharpness(grid3());
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let h = ObstacleMap::filled(9, 8.0).unwrap();
        let link = Link::new([2.0, 5.0, 1.5], [28.0, 5.0, 20.0]).unwrap();
        let ds = dataset(vec![Measurement { link, y: -60.0 }]);
        let g = model.grad_h(&ds, &theta, &h).unwrap();
        for (m, v) in g.iter().enumerate() {
            if m < 3 {
                assert!(*v != 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn deep_los_has_no_nlos_gradient() {
        let model = ChannelModel::with_default_sharpness(grid3());
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let h = ObstacleMap::filled(9, -100.0).unwrap();
        let link = Link::new([2.0, 5.0, 1.5], [28.0, 25.0, 20.0]).unwrap();
        let ds = dataset(vec![Measurement { link, y: -60.0 }]);
        let g = model.grad_theta(&ds, &theta, &h).unwrap();
        assert!(g[0].abs() > 1.0 && g[1].abs() > 1.0);
        assert!(g[2].abs() < 1e-20 && g[3].abs() < 1e-20);
    }
}
