//! Rolls out the noisy expert on a few scenarios and prints, per step, the
//! clean expert input next to the applied (perturbed and projected) label.

use microgrid_empc::empc::EmpcConfig;
use microgrid_empc::grid::MicrogridParams;
use microgrid_empc::imitation::{collect_dataset, feature_names, CollectConfig, FeatureConfig, NoiseConfig};
use microgrid_empc::scenario::{sample_scenarios, ScenarioConfig};

fn main() -> microgrid_empc::Result<()> {
    let params = MicrogridParams::reference();
    let cfg = EmpcConfig::new(&params, 6);
    let fcfg = FeatureConfig::default();
    let scen = sample_scenarios(&params.load_res, &params.exchange, 2, &[44.0, 56.0], 9, &ScenarioConfig::default())?;
    let noise = NoiseConfig::default_for(&params, 4);
    let ccfg = CollectConfig::new(6);
    let ds = collect_dataset(&params, &scen, &cfg, &fcfg, &noise, &ccfg)?;

    let names = feature_names(params.n_gen(), 6, &fcfg);
    println!("{} rows, {} features ({} .. {})", ds.len(), ds.n_features(), names[0], names[names.len() - 1]);
    println!("failed scenarios: {}, labels outside box: {}, SoC excursions: {}", ds.failed.len(), ds.labels_outside_box, ds.soc_excursions);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:7.2}")).collect::<Vec<_>>().join(" ");
    for r in ds.rows.iter().filter(|r| r.scenario_id == 0) {
        println!("t={:2} soc {:5.1}  expert [{}]  applied [{}]", r.t, r.features[0], fmt(&r.expert), fmt(&r.label));
    }
    Ok(())
}
