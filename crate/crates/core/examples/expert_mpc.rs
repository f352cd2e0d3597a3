//! Solves the six-step economic MPC for a handful of random operating points
//! and prints the first-stage decision with solver statistics.

use microgrid_empc::empc::{random_info, solve_empc, EmpcConfig};
use microgrid_empc::grid::MicrogridParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let params = MicrogridParams::reference();
    let cfg = EmpcConfig::new(&params, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n: usize = std::env::args().nth(1).map_or(Ok(8), |s| s.parse())?;
    let mut total = 0.0;
    for k in 0..n {
        let info = random_info(&params, cfg.horizon, &mut rng);
        let sol = solve_empc(&params, &info, &cfg)?;
        let u = &sol.plan.inputs[0];
        total += sol.solve_time.as_secs_f64();
        println!(
            "#{k:<3} soc0 {:5.1}  gen {:?}  exg {:7.2}  beta {:.3}  cost {:8.3}  nodes {:4}  {:7.2} ms",
            info.soc0,
            u.gen_power.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>(),
            u.p_exg,
            u.beta,
            sol.objective,
            sol.nodes,
            sol.solve_time.as_secs_f64() * 1e3
        );
    }
    println!("mean solve time {:.2} ms", total / n as f64 * 1e3);
    Ok(())
}
