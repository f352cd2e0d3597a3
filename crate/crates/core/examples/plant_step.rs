//! One step of the plant: input box, projection of an arbitrary input, the
//! storage power implied by the bus balance, the stage-cost breakdown and the
//! next state.

use microgrid_empc::grid::{
    augmented_step, clip_to_box, input_box, stage_cost_breakdown, validate_params, BoxMode, ControlInput, Disturbance, GridState,
    MicrogridParams, PriceSample,
};

fn main() -> microgrid_empc::Result<()> {
    let params = MicrogridParams::reference();
    let problems = validate_params(&params);
    println!("reference plant: {} generators, {} validation findings", params.n_gen(), problems.len());

    let state = GridState {
        soc: 40.0,
        prev_gen_power: vec![30.0, 0.0],
        prev_gen_on: vec![true, false],
    };
    let w = Disturbance { p_res: 35.0, p_load: 110.0 };
    let price = PriceSample::nominal(&params.exchange);

    for mode in [BoxMode::AdjoinOff, BoxMode::Strict] {
        let bx = input_box(&params, &state, mode)?;
        let raw = ControlInput {
            gen_power: vec![70.0, 2.0],
            p_exg: 10.0,
            beta: 0.5,
        };
        let u = clip_to_box(&raw, &bx);
        let cost = stage_cost_breakdown(&params, &state, &u, w, price)?;
        let step = augmented_step(&params, &state, &u, w)?;
        println!("\n{mode:?}");
        for (i, g) in bx.gens.iter().enumerate() {
            println!("  generator {i}: [{:.1}, {:.1}] kW, OFF admissible: {}", g.lo, g.hi, g.allow_off);
        }
        println!("  raw {:?} -> clipped {:?}", raw.to_vec(), u.to_vec());
        println!("  P_ess {:.2} kW, next SoC {:.2} kWh, overload {}", step.p_ess, step.next.soc, step.ess_overload);
        println!(
            "  cost: generators {:.3}, storage {:.3}, curtailment {:.3}, exchange {:.3}, total {:.3}",
            cost.generators,
            cost.ess,
            cost.load,
            cost.exchange,
            cost.total()
        );
    }
    Ok(())
}
