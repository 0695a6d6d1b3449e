use fedradio::experiments::{generate_scenario, run_on_scenario, ExperimentConfig};
use fedradio::fed_engine::run_training;
use fedradio::privacy::Mechanism;
use fedradio::radio_model::ChannelModel;

#[test]
fn small_steps_without_noise_decrease_the_loss() {
    let cfg = ExperimentConfig::default();
    let sc = generate_scenario(&cfg.scenario).unwrap();
    let model = ChannelModel::new(sc.grid, cfg.model.sharpness).unwrap();
    let mut train = cfg.training.clone();
    train.mechanism = Mechanism::None;
    train.clip_c = 1e9;
    train.eta_h = 1.0;
    train.eta_theta = 1e-4;
    train.rounds = 100;
    train.checkpoints.clear();
    let hist = run_training(&sc.users, &model, &cfg.init.heights(&sc), &cfg.init.theta(&sc), &train, None).unwrap();
    let mut prev = hist.initial_loss;
    let mut rises = 0;
    for r in &hist.records {
        if r.loss > prev * (1.0 + 1e-12) {
            rises += 1;
        }
        prev = r.loss;
    }
    println!("loss {:.4} -> {:.4}, {rises} rises", hist.initial_loss, prev);
    assert!(prev < hist.initial_loss);
    assert!(rises * 100 <= hist.records.len(), "{rises} rises in {} rounds", hist.records.len());
}

#[test]
fn noiseless_training_cuts_map_error_below_forty_percent() {
    let mut cfg = ExperimentConfig::default();
    cfg.training.mechanism = Mechanism::None;
    let sc = generate_scenario(&cfg.scenario).unwrap();
    let out = run_on_scenario(&sc, &cfg, "mae").unwrap();
    let first = out.history.records[0].mae.unwrap();
    let last = out.final_mae().unwrap();
    println!("map MAE round 1 {first:.3} dB, round {} {last:.3} dB, ratio {:.3}", cfg.training.rounds, last / first);
    assert!(last < 0.4 * first);
}
