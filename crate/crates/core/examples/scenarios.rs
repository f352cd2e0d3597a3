//! Samples a scenario set, prints the nominal day and the spread of the
//! realizations, and shows how forecast error grows with lookahead.

use microgrid_empc::grid::MicrogridParams;
use microgrid_empc::scenario::{forecast, nominal_profiles, sample_scenarios, ForecastConfig, ScenarioConfig, DEFAULT_SOC0};

fn main() -> microgrid_empc::Result<()> {
    let params = MicrogridParams::reference();
    let cfg = ScenarioConfig::default();
    let (pv, wind, load) = nominal_profiles(24, &params.load_res);
    let set = sample_scenarios(&params.load_res, &params.exchange, 50, &DEFAULT_SOC0, 7, &cfg)?;
    println!("{} scenarios of {} steps", set.len(), cfg.steps);

    println!("\n hour   pv   wind  load | res min..max   load min..max | c_p min..max");
    for h in 0..24 {
        let res: Vec<f64> = set.iter().map(|s| s.true_res[h]).collect();
        let ld: Vec<f64> = set.iter().map(|s| s.true_load[h]).collect();
        let cp: Vec<f64> = set.iter().map(|s| s.c_p[h]).collect();
        let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{h:5} {:5.1} {:5.1} {:5.1} | {:5.1}..{:5.1}   {:5.1}..{:5.1}   | {:.3}..{:.3}",
            pv.values[h],
            wind.values[h],
            load.values[h],
            lo(&res),
            hi(&res),
            lo(&ld),
            hi(&ld),
            lo(&cp),
            hi(&cp)
        );
    }

    let fc = ForecastConfig::default_for(6);
    println!("\nmean absolute load forecast error by lookahead (kW):");
    for k in 0..6 {
        let mut err = 0.0;
        let mut n = 0.0;
        for s in &set {
            for t in 0..24 {
                let w = forecast(s, t, 6, &fc, &params.load_res)?;
                err += (w[k].p_load - s.true_load[t + k]).abs();
                n += 1.0;
            }
        }
        println!("  t+{k}: {:.2} (band {:.0}%)", err / n, 100.0 * fc.rel_band[k]);
    }
    Ok(())
}
