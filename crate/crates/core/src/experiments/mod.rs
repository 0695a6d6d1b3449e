//! Scenario generation, experiment orchestration, metrics and verifiers.

mod metrics;
mod run;
mod scenario;
mod verify;

pub use metrics::{eval_links, map_mae, EvalSet, MetricsRow, MetricsTable, MetricsWriter};
pub use run::{
    default_train_config, run_experiment, run_on_scenario, run_sweep, sweep_points, AttackConfig, AttackTarget,
    EvalConfig, ExperimentConfig, ExperimentOutput, InitConfig, InitHeights, ModelConfig, SweepConfig, SweepPoint,
    SCHEMA_VERSION,
};
pub use scenario::{
    generate_scenario, rasterize, Building, BuildingSpec, Footprint, Labeler, Scenario, ScenarioConfig, Shape,
};
pub use verify::{
    estimate_constants, verify_bias_variance, verify_gradient_attenuation, AttenuationReport, BiasVariancePoint,
    BiasVarianceReport, Profile, SmoothnessEstimate, DIRECTIONS,
};
