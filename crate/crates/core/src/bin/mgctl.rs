use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use microgrid_empc::empc::EmpcConfig;
use microgrid_empc::grid::{BoxMode, MicrogridParams};
use microgrid_empc::harness::{export_report, run_batch, Controller, ExpertController, LearnedController, ReportFormat, SimConfig};
use microgrid_empc::imitation::{
    collect_dataset, feature_names, load_dataset, save_dataset, train_policy, CollectConfig, FeatureConfig, LearnedPolicy, NoiseConfig,
};
use microgrid_empc::neural::TrainConfig;
use microgrid_empc::scenario::{load_scenarios, sample_scenarios, save_scenarios, ScenarioConfig, DEFAULT_SOC0};
use microgrid_empc::{Error, Result};

/// Microgrid economic MPC and imitation-learning pipeline.
#[derive(Parser, Debug)]
#[command(name = "mgctl", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Plant parameter file (JSON); the built-in reference plant when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// MPC prediction horizon in steps.
    #[arg(long, global = true, default_value_t = 6)]
    horizon: usize,
    /// Closed-loop steps per scenario.
    #[arg(long, global = true, default_value_t = 24)]
    t_sim: usize,
    /// Generator inputs must lie in [lo, hi]; OFF is not adjoined to the input box.
    #[arg(long, global = true)]
    strict_eq28: bool,
    /// Ramp limits do not block shutting an ON generator down.
    #[arg(long, global = true)]
    allow_shutdown: bool,
    /// Worker threads for data collection.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample disturbance and price scenarios.
    GenScenarios {
        #[arg(long, default_value_t = 50)]
        n_real: usize,
        /// Comma-separated initial SoC values (kWh).
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SOC0.to_vec())]
        soc0_list: Vec<f64>,
        #[arg(long, env = "MG_SEED", default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out the (noisy) expert and write a training dataset.
    Collect {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Proposed)]
        mode: Mode,
        /// Multiplier on the default input noise (proposed mode only).
        #[arg(long, default_value_t = 1.0)]
        sigma_scale: f64,
        /// Curtailment grid points of the virtual-disturbance features.
        #[arg(long, default_value_t = 3)]
        n_beta: usize,
        /// Lookahead steps with virtual-disturbance features (proposed mode only).
        #[arg(long, default_value_t = 6)]
        t_w: usize,
        #[arg(long, env = "MG_SEED", default_value_t = 2)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a policy network to a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, env = "MG_SEED", default_value_t = 3)]
        seed: u64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Run the expert and the learned policies on a scenario set.
    Compare {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        model_proposed: Option<PathBuf>,
        #[arg(long)]
        model_baseline: Option<PathBuf>,
        /// Output prefix; `.csv` and `.md` are appended.
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Print the feature index table.
    FeatureMap {
        #[arg(long, default_value_t = 3)]
        n_beta: usize,
        #[arg(long, default_value_t = 6)]
        t_w: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Virtual-disturbance features and noise injection.
    Proposed,
    /// Plain information tuple, clean expert labels.
    Baseline,
}

impl Common {
    fn params(&self) -> Result<MicrogridParams> {
        let p = match &self.config {
            Some(path) => MicrogridParams::load(path)?,
            None => MicrogridParams::reference(),
        };
        p.ensure_valid()?;
        Ok(p)
    }

    fn box_mode(&self) -> BoxMode {
        if self.strict_eq28 {
            BoxMode::Strict
        } else {
            BoxMode::AdjoinOff
        }
    }

    fn empc(&self, p: &MicrogridParams) -> Result<EmpcConfig> {
        let mut cfg = EmpcConfig::new(p, self.horizon);
        cfg.allow_shutdown = self.allow_shutdown;
        cfg.box_mode = self.box_mode();
        cfg.check()?;
        Ok(cfg)
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::GenScenarios { n_real, soc0_list, seed, out } => {
            let p = c.params()?;
            let scfg = ScenarioConfig {
                steps: (c.t_sim + c.horizon).max(ScenarioConfig::default().steps),
                ..ScenarioConfig::default()
            };
            if let Some(v) = soc0_list.iter().find(|v| !(p.ess.soc_min..=p.ess.soc_max).contains(*v)) {
                return Err(Error::Contract(format!("initial SoC {v} outside [{}, {}]", p.ess.soc_min, p.ess.soc_max)));
            }
            let s = sample_scenarios(&p.load_res, &p.exchange, n_real, &soc0_list, seed, &scfg)?;
            save_scenarios(&out, &s)?;
            println!("wrote {} scenarios of {} steps to {}", s.len(), scfg.steps, out.display());
        }
        Cmd::Collect { scenarios, mode, sigma_scale, n_beta, t_w, seed, out } => {
            let p = c.params()?;
            let cfg = c.empc(&p)?;
            let sc = load_scenarios(&scenarios)?;
            let (fcfg, noise) = match mode {
                Mode::Proposed => (FeatureConfig { n_beta, t_w }, NoiseConfig::default_for(&p, seed).scaled(sigma_scale)),
                Mode::Baseline => (FeatureConfig { n_beta, t_w: 0 }, NoiseConfig::zero(p.n_gen() + 2, seed)),
            };
            let mut ccfg = CollectConfig::new(c.horizon);
            ccfg.t_sim = c.t_sim;
            ccfg.jobs = c.jobs;
            let ds = collect_dataset(&p, &sc, &cfg, &fcfg, &noise, &ccfg)?;
            save_dataset(&out, &ds)?;
            println!(
                "wrote {} rows x {} features to {} ({} of {} scenarios failed, {} labels outside the input box, {} SoC excursions)",
                ds.len(),
                ds.n_features(),
                out.display(),
                ds.failed.len(),
                sc.len(),
                ds.labels_outside_box,
                ds.soc_excursions
            );
            for f in &ds.failed {
                println!("  scenario {} failed at step {}: {}", f.scenario_id, f.t, f.reason);
            }
        }
        Cmd::Train { dataset, seed, max_epochs, out_model } => {
            let ds = load_dataset(&dataset)?;
            let mut tcfg = TrainConfig { seed, ..TrainConfig::default() };
            if let Some(m) = max_epochs {
                tcfg.max_epochs = m;
            }
            let (pol, log) = train_policy(&ds, c.box_mode(), &tcfg)?;
            pol.save(&out_model)?;
            let last = log.final_epoch();
            println!(
                "trained on {} rows ({} validation) for {} epochs; best epoch {}; final train loss {:.6e}; best val loss {:.6e}; wrote {}",
                log.n_train,
                log.n_val,
                log.epochs.len(),
                log.best_epoch,
                last.map_or(log.initial_train_loss, |e| e.train_loss),
                log.best_val_loss,
                out_model.display()
            );
        }
        Cmd::Compare { scenarios, model_proposed, model_baseline, out_report } => {
            let p = c.params()?;
            let cfg = c.empc(&p)?;
            let sc = load_scenarios(&scenarios)?;
            let mut ctrls: Vec<Box<dyn Controller>> = vec![Box::new(ExpertController::new(cfg))];
            for (name, path) in [("proposed", model_proposed), ("baseline", model_baseline)] {
                if let Some(path) = path {
                    ctrls.push(Box::new(LearnedController::new(name, LearnedPolicy::load(&path)?)));
                }
            }
            let mut sim = SimConfig::new(c.horizon);
            sim.t_sim = c.t_sim;
            let rep = run_batch(&mut ctrls, &sc, &p, &sim)?;
            let csv = with_ext(&out_report, "csv");
            let md = with_ext(&out_report, "md");
            export_report(&rep, &csv, ReportFormat::Csv)?;
            export_report(&rep, &md, ReportFormat::Markdown)?;
            println!("wrote {} and {} ({} episodes, {} failed)", csv.display(), md.display(), rep.episodes.len(), rep.failures.len());
            let mut verdict = Vec::new();
            for s in rep.summaries() {
                let med = |q: Option<microgrid_empc::harness::Quartiles>| q.map_or("n/a".to_string(), |q| format!("{:.4}", q.median));
                verdict.push(format!("{}: J_eco ratio {} J_time ratio {}", s.controller, med(s.eco_ratio), med(s.time_ratio)));
            }
            println!("verdict: {}", verdict.join("; "));
        }
        Cmd::FeatureMap { n_beta, t_w } => {
            let p = c.params()?;
            let fcfg = FeatureConfig { n_beta, t_w };
            fcfg.check(c.horizon)?;
            for (i, n) in feature_names(p.n_gen(), c.horizon, &fcfg).iter().enumerate() {
                println!("f_{i}\t{n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mgctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
