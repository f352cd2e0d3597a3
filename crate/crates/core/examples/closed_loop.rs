//! End to end at small scale: collect noisy-expert data on a handful of
//! scenarios, train a policy, and compare it with the expert in closed loop on
//! fresh scenarios.

use microgrid_empc::empc::EmpcConfig;
use microgrid_empc::grid::{BoxMode, MicrogridParams};
use microgrid_empc::harness::{report_markdown, run_batch, Controller, ExpertController, LearnedController, SimConfig};
use microgrid_empc::imitation::{collect_dataset, train_policy, CollectConfig, FeatureConfig, NoiseConfig};
use microgrid_empc::neural::TrainConfig;
use microgrid_empc::scenario::{sample_scenarios, ScenarioConfig, DEFAULT_SOC0};

fn main() -> microgrid_empc::Result<()> {
    let n_real: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let params = MicrogridParams::reference();
    let cfg = EmpcConfig::new(&params, 6);
    let scfg = ScenarioConfig::default();
    let train = sample_scenarios(&params.load_res, &params.exchange, n_real, &DEFAULT_SOC0, 1, &scfg)?;
    let test = sample_scenarios(&params.load_res, &params.exchange, 2, &DEFAULT_SOC0, 101, &scfg)?;

    let ds = collect_dataset(
        &params,
        &train,
        &cfg,
        &FeatureConfig::default(),
        &NoiseConfig::default_for(&params, 2),
        &CollectConfig::new(6),
    )?;
    println!("collected {} rows", ds.len());
    let tcfg = TrainConfig {
        max_epochs: 400,
        ..TrainConfig::default()
    };
    let (policy, log) = train_policy(&ds, BoxMode::AdjoinOff, &tcfg)?;
    println!("trained {} epochs, best validation loss {:.4e}", log.epochs.len(), log.best_val_loss);

    let mut ctrls: Vec<Box<dyn Controller>> = vec![
        Box::new(ExpertController::new(cfg)),
        Box::new(LearnedController::new("learned", policy)),
    ];
    let report = run_batch(&mut ctrls, &test, &params, &SimConfig::new(6))?;
    print!("{}", report_markdown(&report));
    Ok(())
}
