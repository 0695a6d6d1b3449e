use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedradio::adversary::{attack_round, Nu};
use fedradio::experiments::{
    generate_scenario, run_experiment, run_sweep, verify_bias_variance, verify_gradient_attenuation,
    ExperimentConfig, InitHeights, Scenario,
};
use fedradio::fed_engine::{read_gradient_csv, write_gradient_dumps};
use fedradio::geometry::Point2;
use fedradio::privacy::Mechanism;
use fedradio::radio_model::{ChannelModel, ObstacleMap};
use fedradio::{Error, Result};

/// Federated radio-map training under a location-inference attack.
#[derive(Parser)]
#[command(name = "fedradio", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Option<Mechanism>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Attack exponent: a positive number or `inf`.
    #[arg(long, value_parser = parse_nu)]
    nu: Option<Nu>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write its JSON snapshot.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train once, attack the checkpoints and write metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Also write per-user gradient dumps for every checkpoint.
        #[arg(long)]
        dumps: bool,
    },
    /// Attack gradient dumps written by `train --dumps`.
    Attack {
        /// Scenario snapshot from `generate` or `train`.
        #[arg(long)]
        scenario: PathBuf,
        /// Directory of `grad_r{round}_u{user}.csv` files.
        #[arg(long)]
        dumps: PathBuf,
        #[arg(long, value_parser = parse_nu, default_value = "2")]
        nu: Nu,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the configured mechanism x mu x rho x seed sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check that gradient energy decays away from each user.
    VerifyThm1 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        n_mc: usize,
    },
    /// Compare the closed-form localization error with Monte Carlo.
    VerifyThm2 {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        mu: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 200)]
        draws: usize,
    },
}

fn parse_mechanism(s: &str) -> std::result::Result<Mechanism, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_nu(s: &str) -> std::result::Result<Nu, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn apply(cfg: &mut ExperimentConfig, o: &Overrides) -> Result<()> {
    if let Some(m) = o.mechanism {
        cfg.training.mechanism = m;
    }
    if let Some(mu) = o.mu {
        cfg.training.mu = mu;
        cfg.sweep.mu = vec![mu];
    }
    if let Some(rho) = o.rho {
        cfg.training.allocator.rho = rho;
        cfg.sweep.rho = vec![rho];
    }
    if let Some(nu) = o.nu {
        cfg.attack.nu = nu;
    }
    cfg.validate()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let sc = generate_scenario(&cfg.scenario)?;
            write_json(&common.out.join("scenario.json"), &sc)?;
        }
        Command::Train { common, overrides, dumps } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides)?;
            fs::create_dir_all(&common.out)?;
            let id = format!("{}_{}", cfg.name, cfg.training.mechanism);
            let res = run_experiment(&cfg, &id)?;
            write_json(&common.out.join("config.json"), &cfg)?;
            write_json(&common.out.join("scenario.json"), &generate_scenario(&cfg.scenario)?)?;
            res.table.write_csv(BufWriter::new(fs::File::create(common.out.join("metrics.csv"))?))?;
            let mut w = csv::Writer::from_path(common.out.join("history.csv"))?;
            w.write_record(["round", "loss", "mae_db"])?;
            for r in &res.history.records {
                w.write_record([
                    r.round.to_string(),
                    r.loss.to_string(),
                    r.mae.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            let attack = fs::File::create(common.out.join("attack.csv"))?;
            let mut attack = BufWriter::new(attack);
            for (k, rep) in res.attacks.iter().enumerate() {
                rep.write_csv(&mut attack, k == 0)?;
            }
            let summary = serde_json::json!({
                "j_tilde": res.history.j_tilde,
                "initial_loss": res.history.initial_loss,
                "initial_mae_db": res.history.initial_mae,
                "final_theta": res.history.final_theta,
                "allocator": res.history.allocator,
                "mean_rmse_m": res.mean_rmse(),
                "final_mae_db": res.final_mae(),
            });
            write_json(&common.out.join("summary.json"), &summary)?;
            if dumps {
                for cp in &res.history.checkpoints {
                    write_gradient_dumps(&common.out.join("dumps"), cp)?;
                }
            }
        }
        Command::Attack { scenario, dumps, nu, out } => {
            let sc: Scenario = serde_json::from_str(&fs::read_to_string(&scenario)?)?;
            let mut by_round: BTreeMap<usize, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
            let mut names: Vec<_> = fs::read_dir(&dumps)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            for name in names {
                if let Some((r, u)) = parse_dump_name(&name) {
                    by_round.entry(r).or_default().push((u, read_gradient_csv(&dumps.join(&name))?));
                }
            }
            if by_round.is_empty() {
                return Err(Error::Config(format!("no gradient dumps in {}", dumps.display())));
            }
            let truths: Vec<(usize, Point2)> = sc.truths();
            fs::create_dir_all(&out)?;
            let mut f = BufWriter::new(fs::File::create(out.join("attack.csv"))?);
            for (k, (round, mut ups)) in by_round.into_iter().enumerate() {
                ups.sort_by_key(|u| u.0);
                let refs: Vec<(usize, &[f64])> = ups.iter().map(|(u, g)| (*u, g.as_slice())).collect();
                attack_round(round, &refs, &truths, &sc.grid, nu)?.write_csv(&mut f, k == 0)?;
            }
        }
        Command::Sweep { common, overrides } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides)?;
            if let Some(m) = overrides.mechanism {
                cfg.sweep.mechanisms = vec![m];
            }
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("config.json"), &cfg)?;
            run_sweep(&cfg, Some(&common.out.join("metrics.csv")))?;
        }
        Command::VerifyThm1 { common, n_mc } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let sc = generate_scenario(&cfg.scenario)?;
            let model = ChannelModel::new(sc.grid, cfg.model.sharpness)?;
            let h = ObstacleMap::filled(sc.grid.num_cells(), sc.config.h_max)?;
            let theta = cfg.init.theta(&sc);
            let rep = verify_gradient_attenuation(&sc, &model, &h, &theta, n_mc, cfg.seed())?;
            write_json(&common.out.join("thm1.json"), &rep)?;
            let init = if cfg.init.h == InitHeights::HMax { "h_max" } else { "h_max (forced)" };
            log::info!("ordered fraction {:.4} over {} pairs, init {init}", rep.fraction, rep.pairs);
        }
        Command::VerifyThm2 { seed, out, mu, seeds, draws } => {
            fs::create_dir_all(&out)?;
            let g = |p: Point2| (-((p[0] - 0.35).powi(2) + (p[1] - 0.4).powi(2)) / 0.02).exp();
            let noise = |p: Point2| 0.2 + p[0] + 0.5 * p[1];
            let rep = verify_bias_variance(&g, &noise, [0.35, 0.4], mu, &[5, 10, 20, 40], seeds, draws, seed.unwrap_or(0))?;
            let mut w = csv::Writer::from_path(out.join("thm2.csv"))?;
            for p in &rep.points {
                w.serialize(p)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn parse_dump_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("grad_r")?.strip_suffix(".csv")?;
    let (r, u) = rest.split_once("_u")?;
    Some((r.parse().ok()?, u.parse().ok()?))
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).parse_default_env().init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
