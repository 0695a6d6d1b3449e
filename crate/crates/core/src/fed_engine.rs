//! Round-based federated training (FedSGD form).
//!
//! Each round every user evaluates its local gradients at the broadcast
//! model, clips the obstacle-map gradient, adds mechanism noise to it and
//! uploads both gradients. The server averages them with weights `J_i / J`
//! and takes one step on `h` and one on `theta`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Point3;
use crate::privacy::{privatize, AllocatorConfig, Mechanism};
use crate::radio_model::{ChannelModel, Measurement, ObstacleMap, PropagationParams};
use crate::rng;

/// One user's location and labelled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDataset {
    pub user_id: usize,
    pub p_u: Point3,
    pub samples: Vec<Measurement>,
}

impl UserDataset {
    pub fn new(user_id: usize, p_u: Point3, samples: Vec<Measurement>) -> Result<Self> {
        let ds = Self { user_id, p_u, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(invalid(format!("user {} has no samples", self.user_id)));
        }
        if self.samples.iter().any(|s| s.link.user() != self.p_u) {
            return Err(invalid(format!("user {} has a sample from another location", self.user_id)));
        }
        if self.samples.iter().any(|s| !s.y.is_finite()) {
            return Err(invalid(format!("user {} has a non-finite measurement", self.user_id)));
        }
        Ok(())
    }

    /// `J_i`.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta_h: f64,
    pub eta_theta: f64,
    pub clip_c: f64,
    pub rounds: usize,
    pub mechanism: Mechanism,
    pub mu: f64,
    pub allocator: AllocatorConfig,
    pub seed: u64,
    /// Rounds whose model state and uploads are kept.
    pub checkpoints: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_h: 100.0,
            eta_theta: 0.05,
            clip_c: 1.0,
            rounds: 200,
            mechanism: Mechanism::None,
            mu: 0.0,
            allocator: AllocatorConfig::default(),
            seed: 0,
            checkpoints: vec![1, 50, 100, 200],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("eta_h", self.eta_h)?;
        positive("eta_theta", self.eta_theta)?;
        positive("clip_c", self.clip_c)?;
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(invalid(format!("mu must be non-negative, got {}", self.mu)));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds must be at least 1"));
        }
        self.allocator.validate()
    }

    pub fn rho(&self) -> f64 {
        self.allocator.rho
    }
}

/// Scalar metrics after one aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Global loss `F` (dB^2) at the aggregated model.
    pub loss: f64,
    /// Map MAE (dB) when an evaluator was supplied.
    pub mae: Option<f64>,
}

/// What one user sent in a round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Upload {
    pub user_id: usize,
    pub samples: usize,
    /// Clipped obstacle-map gradient before noise.
    pub clipped: Vec<f64>,
    /// The gradient actually uploaded.
    pub noisy: Vec<f64>,
    pub grad_theta: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub round: usize,
    pub h: Vec<f64>,
    pub theta: PropagationParams,
    /// Uploads of this round, sorted by user id.
    pub uploads: Vec<Upload>,
}

/// Bookkeeping over every geometry-aligned allocator call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct AllocatorStats {
    pub invocations: usize,
    pub fallbacks: usize,
    /// Smallest `J_final - J_initial` seen; `None` if never run.
    pub worst_improvement: Option<f64>,
}

impl AllocatorStats {
    fn absorb(&mut self, trace: &[f64], fallback: bool) {
        self.invocations += 1;
        if fallback {
            self.fallbacks += 1;
        }
        if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
            let d = last - first;
            self.worst_improvement = Some(self.worst_improvement.map_or(d, |w| w.min(d)));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHistory {
    pub initial_loss: f64,
    pub initial_mae: Option<f64>,
    /// One record per round; record `t` describes the model after
    /// aggregation `t`.
    pub records: Vec<RoundRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub j_tilde: f64,
    pub allocator: AllocatorStats,
    pub final_h: Vec<f64>,
    pub final_theta: PropagationParams,
}

impl TrainHistory {
    pub fn checkpoint(&self, round: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.round == round)
    }
}

/// Map-quality callback: MAE (dB) of a model `(theta, h)`.
pub type MaeFn<'a> = dyn Fn(&PropagationParams, &[f64]) -> f64 + Sync + 'a;

/// `g * min(1, C / ||g||)`.
pub fn clip(g: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c.is_finite() && c > 0.0) {
        return Err(invalid(format!("clipping threshold must be positive, got {c}")));
    }
    let n = norm(g);
    if n <= c || n == 0.0 {
        return Ok(g.to_vec());
    }
    let f = c / n;
    Ok(g.iter().map(|v| v * f).collect())
}

/// Euclidean norm, rescaled so tiny or huge entries neither underflow nor
/// overflow.
pub fn norm(g: &[f64]) -> f64 {
    let peak = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return peak;
    }
    peak * g.iter().map(|v| (v / peak).powi(2)).sum::<f64>().sqrt()
}

fn weights(sizes: impl Iterator<Item = usize>) -> Result<Vec<f64>> {
    let sizes: Vec<usize> = sizes.collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(invalid("total sample count must be positive"));
    }
    Ok(sizes.iter().map(|&j| j as f64 / total as f64).collect())
}

/// `h - eta_h * sum_i (J_i / J) g_i`.
pub fn aggregate_h(h: &ObstacleMap, uploads: &[(Vec<f64>, usize)], eta_h: f64) -> Result<ObstacleMap> {
    let w = weights(uploads.iter().map(|u| u.1))?;
    if uploads.iter().any(|u| u.0.len() != h.len()) {
        return Err(invalid("upload length differs from obstacle map length"));
    }
    let mut out = h.heights().to_vec();
    for (m, v) in out.iter_mut().enumerate() {
        let step: f64 = uploads.iter().zip(&w).map(|(u, w)| w * u.0[m]).sum();
        *v -= eta_h * step;
    }
    ObstacleMap::new(out)
}

/// `theta - eta_theta * sum_i (J_i / J) g_i`.
pub fn aggregate_theta(theta: &PropagationParams, uploads: &[([f64; 4], usize)], eta_theta: f64) -> Result<PropagationParams> {
    let w = weights(uploads.iter().map(|u| u.1))?;
    let mut t = theta.to_array();
    for (k, v) in t.iter_mut().enumerate() {
        let step: f64 = uploads.iter().zip(&w).map(|(u, w)| w * u.0[k]).sum();
        *v -= eta_theta * step;
    }
    Ok(PropagationParams::from_array(t))
}

/// Dataset-size heterogeneity `sum J_i^2 / J^2`.
pub fn j_tilde(sizes: &[usize]) -> Result<f64> {
    let w = weights(sizes.iter().copied())?;
    let jt: f64 = w.iter().map(|w| w * w).sum();
    let n = sizes.len() as f64;
    assert!(jt >= 1.0 / n - 1e-12 && jt <= 1.0 + 1e-12, "heterogeneity {jt} outside [1/N, 1]");
    Ok(jt)
}

fn require_positive(pairs: &[(&str, f64)]) -> Result<()> {
    for (name, v) in pairs {
        if !(v.is_finite() && *v > 0.0) {
            return Err(invalid(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Largest `eta_h` keeping the descent rate positive:
/// `1 / (L B^2 (1 + mu J~))`.
pub fn max_learning_rate(l_est: f64, b_est: f64, mu: f64, j_tilde: f64) -> Result<f64> {
    require_positive(&[("L", l_est), ("B", b_est), ("J~", j_tilde)])?;
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(invalid(format!("mu must be non-negative, got {mu}")));
    }
    Ok(1.0 / (l_est * b_est * b_est * (1.0 + mu * j_tilde)))
}

/// Largest noise budget compatible with learning rate `eta_h`:
/// `(1 / J~) (1 / (B^2 L eta_h) - 1)`. Non-positive when `eta_h` is
/// already too large for noiseless training.
pub fn max_noise_budget(l_est: f64, b_est: f64, eta_h: f64, j_tilde: f64) -> Result<f64> {
    require_positive(&[("L", l_est), ("B", b_est), ("eta_h", eta_h), ("J~", j_tilde)])?;
    Ok((1.0 / (b_est * b_est * l_est * eta_h) - 1.0) / j_tilde)
}

/// Descent-rate constants of the loss-reduction bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentConstants {
    pub kappa_h: f64,
    pub kappa_theta: f64,
    pub kappa_0: f64,
}

pub fn descent_constants(
    l_est: f64,
    b_est: f64,
    mu: f64,
    j_tilde: f64,
    eta_h: f64,
    eta_theta: f64,
    clip_c: f64,
) -> Result<DescentConstants> {
    require_positive(&[
        ("L", l_est),
        ("B", b_est),
        ("J~", j_tilde),
        ("eta_h", eta_h),
        ("eta_theta", eta_theta),
        ("C", clip_c),
    ])?;
    let b2 = b_est * b_est;
    Ok(DescentConstants {
        kappa_h: eta_h * (0.5 - 0.5 * l_est * eta_h * b2 * (1.0 + mu * j_tilde)),
        kappa_theta: eta_theta - 0.5 * l_est * eta_theta * eta_theta,
        kappa_0: eta_h * b2 * b2 * l_est.powi(4) / (8.0 * clip_c * clip_c),
    })
}

/// Runs `config.rounds` rounds of federated training.
///
/// Local work runs in parallel; uploads are reduced in user-id order and
/// every user draws noise from its own `(seed, user, round)` stream, so the
/// result does not depend on the thread count.
pub fn run_training(
    users: &[UserDataset],
    model: &ChannelModel,
    init_h: &ObstacleMap,
    init_theta: &PropagationParams,
    config: &TrainConfig,
    mae: Option<&MaeFn<'_>>,
) -> Result<TrainHistory> {
    config.validate()?;
    if users.is_empty() {
        return Err(invalid("training needs at least one user"));
    }
    let grid = model.grid;
    if init_h.len() != grid.num_cells() {
        return Err(invalid(format!(
            "initial map has {} cells, grid has {}",
            init_h.len(),
            grid.num_cells()
        )));
    }
    let mut order: Vec<&UserDataset> = users.iter().collect();
    order.sort_by_key(|u| u.user_id);
    if order.windows(2).any(|w| w[0].user_id == w[1].user_id) {
        return Err(invalid("user ids must be unique"));
    }
    for u in &order {
        u.validate()?;
    }
    let sizes: Vec<usize> = order.iter().map(|u| u.len()).collect();
    let w = weights(sizes.iter().copied())?;
    let jt = j_tilde(&sizes)?;
    let prepared: Vec<_> = order.par_iter().map(|u| model.prepare(u)).collect();

    let global_loss = |theta: &PropagationParams, h: &[f64]| -> f64 {
        prepared
            .par_iter()
            .zip(&w)
            .map(|(p, w)| w * model.loss_prepared(p, theta, h))
            .collect::<Vec<_>>()
            .iter()
            .sum()
    };

    let mut h = init_h.heights().to_vec();
    let mut theta = *init_theta;
    let initial_loss = global_loss(&theta, &h);
    let limit = 1e6 * initial_loss;
    let initial_mae = mae.map(|f| f(&theta, &h));
    let mut records: Vec<RoundRecord> = Vec::with_capacity(config.rounds);
    let mut checkpoints = Vec::new();
    let mut stats = AllocatorStats::default();

    for round in 1..=config.rounds {
        let outcomes: Vec<Result<(Upload, Vec<f64>, bool, f64)>> = order
            .par_iter()
            .zip(&prepared)
            .map(|(user, samples)| {
                let ev = model.evaluate(samples, &theta, &h);
                let clipped = clip(&ev.grad_h, config.clip_c)?;
                let mut r = rng::stream(config.seed, &[rng::purpose::PRIVACY_NOISE, user.user_id as u64, round as u64]);
                let priv_ = privatize(
                    &clipped,
                    &grid,
                    [user.p_u[0], user.p_u[1]],
                    config.mechanism,
                    config.mu,
                    &config.allocator,
                    &mut r,
                )?;
                Ok((
                    Upload {
                        user_id: user.user_id,
                        samples: user.len(),
                        clipped,
                        noisy: priv_.noisy,
                        grad_theta: ev.grad_theta,
                    },
                    priv_.trace,
                    priv_.fallback,
                    ev.loss,
                ))
            })
            .collect();
        let mut uploads = Vec::with_capacity(order.len());
        let mut loss_before = 0.0;
        for (o, w) in outcomes.into_iter().zip(&w) {
            let (up, trace, fallback, loss) = o?;
            if config.mechanism == Mechanism::GeometryAligned && config.mu > 0.0 {
                stats.absorb(&trace, fallback);
            }
            loss_before += w * loss;
            uploads.push(up);
        }
        if let Some(prev) = records.last_mut() {
            prev.loss = loss_before;
        }
        check_divergence(round.saturating_sub(1), loss_before, limit)?;

        for (m, v) in h.iter_mut().enumerate() {
            let step: f64 = uploads.iter().zip(&w).map(|(u, w)| w * u.noisy[m]).sum();
            *v -= config.eta_h * step;
        }
        let mut t = theta.to_array();
        for (k, v) in t.iter_mut().enumerate() {
            let step: f64 = uploads.iter().zip(&w).map(|(u, w)| w * u.grad_theta[k]).sum();
            *v -= config.eta_theta * step;
        }
        theta = PropagationParams::from_array(t);

        records.push(RoundRecord { round, loss: f64::NAN, mae: mae.map(|f| f(&theta, &h)) });
        if config.checkpoints.contains(&round) {
            checkpoints.push(Checkpoint { round, h: h.clone(), theta, uploads });
        }
    }
    let final_loss = global_loss(&theta, &h);
    check_divergence(config.rounds, final_loss, limit)?;
    if let Some(last) = records.last_mut() {
        last.loss = final_loss;
    }

    Ok(TrainHistory {
        initial_loss,
        initial_mae,
        records,
        checkpoints,
        j_tilde: jt,
        allocator: stats,
        final_h: h,
        final_theta: theta,
    })
}

fn check_divergence(round: usize, loss: f64, limit: f64) -> Result<()> {
    if !loss.is_finite() || (limit > 0.0 && loss > limit) {
        log::error!("training diverged at round {round}: loss {loss:e} (limit {limit:e})");
        return Err(Error::Diverged { round, loss, limit });
    }
    Ok(())
}

/// Writes one `cell_index,gradient` CSV per upload of a checkpoint into
/// `dir`, named `grad_r{round}_u{user}.csv`. Returns the written paths.
pub fn write_gradient_dumps(dir: &Path, checkpoint: &Checkpoint) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(checkpoint.uploads.len());
    for up in &checkpoint.uploads {
        let path = dir.join(dump_name(checkpoint.round, up.user_id));
        let file = fs::File::create(&path)?;
        write_gradient_csv(std::io::BufWriter::new(file), &up.noisy)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn dump_name(round: usize, user_id: usize) -> String {
    format!("grad_r{round}_u{user_id}.csv")
}

pub fn write_gradient_csv<W: Write>(writer: W, g: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cell_index", "gradient"])?;
    for (m, v) in g.iter().enumerate() {
        w.write_record([m.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a gradient written by [`write_gradient_csv`].
pub fn read_gradient_csv(path: &Path) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Row {
        cell_index: usize,
        gradient: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        if row.cell_index != out.len() {
            return Err(invalid(format!(
                "{}: expected cell {}, found {}",
                path.display(),
                out.len(),
                row.cell_index
            )));
        }
        out.push(row.gradient);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let g = [3.0, 4.0];
        assert_eq!(clip(&g, 10.0).unwrap(), g.to_vec());
        let c = clip(&g, 2.5).unwrap();
        assert!((c[0] - 1.5).abs() < 1e-15 && (c[1] - 2.0).abs() < 1e-15);
        assert!((norm(&c) - 2.5).abs() < 1e-15);
        assert_eq!(clip(&[0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0]);
        assert!(clip(&g, 0.0).is_err());
        let tiny = [3e-200, 4e-200];
        assert!((norm(&tiny) - 5e-200).abs() < 1e-214);
    }

    #[test]
    fn aggregate_h_examples() {
        let h = ObstacleMap::new(vec![1.0, 2.0, 3.0]).unwrap();
        let same = aggregate_h(&h, &[(vec![0.0; 3], 4)], 0.5).unwrap();
        assert_eq!(same, h);
        let e = aggregate_h(&h, &[(vec![0.0, 1.0, 0.0], 7)], 0.1).unwrap();
        assert_eq!(e.heights(), &[1.0, 2.0 - 0.1, 3.0]);
        let g = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let two = aggregate_h(&h, &[(g.clone(), 1), (neg, 3)], 0.2).unwrap();
        for m in 0..3 {
            let expect = h.heights()[m] - 0.2 * (-0.5 * g[m]);
            assert!((two.heights()[m] - expect).abs() < 1e-15);
        }
        assert!(aggregate_h(&h, &[(vec![0.0; 2], 1)], 0.1).is_err());
    }

    #[test]
    fn aggregate_theta_examples() {
        let t = PropagationParams::new(-20.0, -30.0, -35.0, -25.0);
        assert_eq!(aggregate_theta(&t, &[([0.0; 4], 3)], 0.1).unwrap(), t);
        let g = [1.0, 2.0, -1.0, 0.5];
        let n = [-1.0, -2.0, 1.0, -0.5];
        assert_eq!(aggregate_theta(&t, &[(g, 2), (n, 2)], 0.3).unwrap(), t);
        let one = aggregate_theta(&t, &[(g, 5)], 0.5).unwrap();
        assert_eq!(one.to_array(), [-20.5, -31.0, -34.5, -25.25]);
    }

    #[test]
    fn learning_rate_examples() {
        assert_eq!(max_learning_rate(1.0, 1.0, 0.0, 0.3).unwrap(), 1.0);
        let a = max_learning_rate(2.0, 1.5, 1.0, 0.2).unwrap();
        let b = max_learning_rate(2.0, 1.5, 2.0, 0.2).unwrap();
        assert!(b < a);
        assert!((max_learning_rate(2.0, 1.0, 10.0, 0.1).unwrap() - 0.25).abs() < 1e-15);
        assert!(max_learning_rate(0.0, 1.0, 1.0, 0.1).is_err());
        assert!(max_learning_rate(1.0, -1.0, 1.0, 0.1).is_err());
        let eta = max_learning_rate(2.0, 1.5, 3.0, 0.2).unwrap();
        assert!((max_noise_budget(2.0, 1.5, eta, 0.2).unwrap() - 3.0).abs() < 1e-12);
        let k = descent_constants(2.0, 1.5, 3.0, 0.2, eta, 0.1, 1.0).unwrap();
        assert!(k.kappa_h.abs() < 1e-15 || k.kappa_h > 0.0);
    }

    #[test]
    fn heterogeneity_bounds() {
        assert!((j_tilde(&[5, 5, 5, 5]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(j_tilde(&[9]).unwrap(), 1.0);
        let jt = j_tilde(&[1, 100]).unwrap();
        assert!(jt > 0.5 && jt < 1.0);
    }

    #[test]
    fn gradient_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let g = vec![0.25, -1e-300, 3.5e12];
        write_gradient_csv(fs::File::create(&path).unwrap(), &g).unwrap();
        assert_eq!(read_gradient_csv(&path).unwrap(), g);
    }
}
