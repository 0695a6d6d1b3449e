//! Experiment configuration, orchestration and sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{attack_round, AttackReport, Nu};
use crate::error::{Error, Result};
use crate::fed_engine::{run_training, TrainConfig, TrainHistory};
use crate::privacy::Mechanism;
use crate::radio_model::{ChannelModel, ObstacleMap, PropagationParams};

use super::metrics::{EvalSet, MetricsRow, MetricsTable, MetricsWriter};
use super::scenario::{generate_scenario, Scenario, ScenarioConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Starting obstacle map for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitHeights {
    /// Every cell at the scenario's `h_max`.
    #[default]
    HMax,
    Zero,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub h: InitHeights,
    /// Starting propagation parameters; `None` uses the scenario's truth.
    pub theta: Option<PropagationParams>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { h: InitHeights::Zero, theta: None }
    }
}

impl InitConfig {
    pub fn heights(&self, scenario: &Scenario) -> ObstacleMap {
        let v = match self.h {
            InitHeights::HMax => scenario.config.h_max,
            InitHeights::Zero => 0.0,
            InitHeights::Constant(c) => c,
        };
        ObstacleMap::filled(scenario.grid.num_cells(), v).expect("grid has cells")
    }

    pub fn theta(&self, scenario: &Scenario) -> PropagationParams {
        self.theta.unwrap_or(scenario.theta_true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Logistic sharpness of the trained model (1/m).
    pub sharpness: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { sharpness: 0.25 }
    }
}

/// Which gradient the adversary observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    /// The uploaded (noisy) gradient.
    #[default]
    Uploaded,
    /// The clipped gradient before noise.
    Clipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub nu: Nu,
    pub target: AttackTarget,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { nu: Nu::default(), target: AttackTarget::Uploaded }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// User positions per axis of the MAE grid.
    pub mae_density: usize,
    /// Base stations used by the MAE grid.
    pub mae_bs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mae_density: 20, mae_bs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mechanisms: Vec<Mechanism>,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    /// Number of seeds; run `k` uses `seed + k`.
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mechanisms: vec![Mechanism::None, Mechanism::Uniform, Mechanism::GeometryAligned],
            mu: vec![0.5, 1.0, 5.0, 10.0, 20.0, 50.0],
            rho: vec![1.0, 10.0, 100.0],
            seeds: 5,
        }
    }
}

pub fn default_train_config() -> TrainConfig {
    TrainConfig::default()
}

fn default_training() -> TrainConfig {
    default_train_config()
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Top-level JSON configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_training")]
    pub training: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "desk".into(),
            scenario: ScenarioConfig::default(),
            model: ModelConfig::default(),
            init: InitConfig::default(),
            training: default_train_config(),
            attack: AttackConfig::default(),
            evaluation: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scenario.validate()?;
        self.training.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.model.sharpness > 0.0 && self.model.sharpness.is_finite()) {
            return Err(Error::Config("model sharpness must be positive".into()));
        }
        if self.evaluation.mae_density == 0 || self.evaluation.mae_bs == 0 {
            return Err(Error::Config("evaluation grid must be non-empty".into()));
        }
        Ok(())
    }

    /// Same configuration with scenario and training keyed by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.scenario.seed = seed;
        c.training.seed = seed;
        c
    }

    pub fn seed(&self) -> u64 {
        self.training.seed
    }
}

/// Everything produced by one run.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: MetricsTable,
    pub history: TrainHistory,
    pub attacks: Vec<AttackReport>,
}

impl ExperimentOutput {
    /// RMSE averaged over the evaluated checkpoints.
    pub fn mean_rmse(&self) -> Option<f64> {
        self.table.mean_rmse()
    }

    pub fn final_mae(&self) -> Option<f64> {
        self.history.records.last().and_then(|r| r.mae)
    }
}

/// Trains on a generated scenario, attacks every checkpoint and tabulates
/// MAE, RMSE and loss at those rounds.
pub fn run_experiment(config: &ExperimentConfig, id: &str) -> Result<ExperimentOutput> {
    config.validate()?;
    let scenario = generate_scenario(&config.scenario)?;
    run_on_scenario(&scenario, config, id)
}

pub fn run_on_scenario(scenario: &Scenario, config: &ExperimentConfig, id: &str) -> Result<ExperimentOutput> {
    let model = ChannelModel::new(scenario.grid, config.model.sharpness)?;
    let eval = EvalSet::for_scenario(&model, scenario, config.evaluation.mae_density, config.evaluation.mae_bs)?;
    let init_h = config.init.heights(scenario);
    let init_theta = config.init.theta(scenario);
    let mut training = config.training.clone();
    training.checkpoints.retain(|&r| r >= 1 && r <= training.rounds);
    training.checkpoints.sort_unstable();
    training.checkpoints.dedup();
    let mae = |theta: &PropagationParams, h: &[f64]| eval.mae(&model, theta, h);
    let history = run_training(&scenario.users, &model, &init_h, &init_theta, &training, Some(&mae))?;

    let truths = scenario.truths();
    let mut attacks = Vec::with_capacity(history.checkpoints.len());
    let mut rows = Vec::with_capacity(history.checkpoints.len());
    for cp in &history.checkpoints {
        let uploads: Vec<(usize, &[f64])> = cp
            .uploads
            .iter()
            .map(|u| {
                let g = match config.attack.target {
                    AttackTarget::Uploaded => &u.noisy,
                    AttackTarget::Clipped => &u.clipped,
                };
                (u.user_id, g.as_slice())
            })
            .collect();
        let report = attack_round(cp.round, &uploads, &truths, &scenario.grid, config.attack.nu)?;
        let rec = history.records[cp.round - 1];
        rows.push(MetricsRow {
            experiment: id.to_string(),
            mechanism: training.mechanism.to_string(),
            mu: training.mu,
            rho: training.allocator.rho,
            nu: config.attack.nu.to_string(),
            seed: training.seed,
            round: cp.round,
            mae_db: rec.mae.unwrap_or(f64::NAN),
            rmse_m: report.rmse_m,
            loss: rec.loss,
        });
        attacks.push(report);
    }
    Ok(ExperimentOutput { table: MetricsTable { rows }, history, attacks })
}

/// One configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub id: String,
    pub mechanism: Mechanism,
    pub mu: f64,
    pub rho: f64,
    pub seed: u64,
}

/// Expands the sweep grid. Mechanisms without an allocator are run once per
/// `(mu, seed)` and the noiseless baseline once per seed.
pub fn sweep_points(config: &ExperimentConfig) -> Vec<SweepPoint> {
    let s = &config.sweep;
    let base = config.seed();
    let mut out = Vec::new();
    for k in 0..s.seeds as u64 {
        let seed = base + k;
        for &mech in &s.mechanisms {
            match mech {
                Mechanism::None => out.push(SweepPoint {
                    id: format!("none_s{seed}"),
                    mechanism: mech,
                    mu: 0.0,
                    rho: config.training.allocator.rho,
                    seed,
                }),
                Mechanism::Uniform => {
                    for &mu in &s.mu {
                        out.push(SweepPoint {
                            id: format!("uniform_mu{mu}_s{seed}"),
                            mechanism: mech,
                            mu,
                            rho: config.training.allocator.rho,
                            seed,
                        });
                    }
                }
                Mechanism::GeometryAligned => {
                    for &mu in &s.mu {
                        for &rho in &s.rho {
                            out.push(SweepPoint {
                                id: format!("geo_mu{mu}_rho{rho}_s{seed}"),
                                mechanism: mech,
                                mu,
                                rho,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

impl SweepPoint {
    pub fn apply(&self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut c = config.with_seed(self.seed);
        c.training.mechanism = self.mechanism;
        c.training.mu = self.mu;
        c.training.allocator.rho = self.rho;
        c
    }
}

/// Runs every sweep point in order, appending its rows to `out` (if given)
/// as soon as the point finishes.
pub fn run_sweep(config: &ExperimentConfig, out: Option<&Path>) -> Result<MetricsTable> {
    config.validate()?;
    let mut writer = out.map(MetricsWriter::create).transpose()?;
    let mut table = MetricsTable::default();
    let mut cached: Option<(u64, Scenario)> = None;
    for point in sweep_points(config) {
        let cfg = point.apply(config);
        if cached.as_ref().map(|c| c.0) != Some(point.seed) {
            cached = Some((point.seed, generate_scenario(&cfg.scenario)?));
        }
        let scenario = &cached.as_ref().expect("scenario cached").1;
        log::info!("sweep point {}", point.id);
        let res = run_on_scenario(scenario, &cfg, &point.id)?;
        if let Some(w) = writer.as_mut() {
            w.append(&res.table.rows)?;
        }
        table.rows.extend(res.table.rows);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_rejections() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let minimal = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(minimal.training, default_train_config());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "bogus": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "scenario": {"nope": 1}}"#).is_err());
        let geo = ExperimentConfig::from_json(
            r#"{"schema_version": 1, "training": {"eta_h": 1, "eta_theta": 1, "clip_c": 1, "rounds": 3, "mechanism": "geo"}}"#,
        )
        .unwrap();
        assert_eq!(geo.training.mechanism, Mechanism::GeometryAligned);
        let init = ExperimentConfig::from_json(r#"{"schema_version": 1, "init": {"h": {"constant": 4.5}}}"#).unwrap();
        assert_eq!(init.init.h, InitHeights::Constant(4.5));
    }

    #[test]
    fn sweep_expansion() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep = SweepConfig {
            mechanisms: vec![Mechanism::None, Mechanism::Uniform, Mechanism::GeometryAligned],
            mu: vec![1.0, 5.0],
            rho: vec![1.0, 10.0],
            seeds: 2,
        };
        let pts = sweep_points(&cfg);
        assert_eq!(pts.len(), 2 * (1 + 2 + 4));
        assert_eq!(pts[0].id, "none_s0");
        assert_eq!(pts.last().unwrap().id, "geo_mu5_rho10_s1");
    }
}
