//! Invariants across modules, checked on generated inputs.

use microgrid_empc::empc::{build_empc_miqp, decode, random_info, reprice, EmpcConfig};
use microgrid_empc::grid::{input_box, BoxMode, GridState, MicrogridParams};
use microgrid_empc::harness::{simulate_episode, LearnedController, SimConfig};
use microgrid_empc::imitation::{build_features, noisy_expert_action, FeatureConfig, LearnedPolicy, NoiseConfig, PolicyMeta, BOX_TOL};
use microgrid_empc::miqp::{solve_bnb, solve_enumerate, SolverOptions};
use microgrid_empc::neural::{loss_and_grad, model_from_json, model_to_json, MlpParams, MlpSpec, Model, Normalizer, TrainConfig};
use microgrid_empc::scenario::{forecast, sample_realization, sample_scenarios, ForecastConfig, ScenarioConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params() -> MicrogridParams {
    MicrogridParams::reference()
}

fn random_model(seed: u64, fcfg: FeatureConfig) -> LearnedPolicy {
    let spec = MlpSpec::with_io(fcfg.dim(2, 6), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::glorot(&spec, &mut rng);
    for l in &mut p.layers {
        for b in &mut l.b {
            *b = rng.random_range(-1.0..1.0);
        }
    }
    let n_in = spec.n_inputs();
    let meta = PolicyMeta {
        feature_config: fcfg,
        n_gen: 2,
        horizon: 6,
        box_mode: BoxMode::AdjoinOff,
        train: TrainConfig::default(),
    };
    LearnedPolicy::from_model(Model {
        spec,
        params: p,
        input_norm: Normalizer {
            mean: vec![40.0; n_in],
            std: vec![30.0; n_in],
        },
        output_norm: Normalizer {
            mean: vec![20.0, 20.0, 30.0, 0.1],
            std: vec![40.0, 40.0, 100.0, 0.2],
        },
        meta: serde_json::to_value(meta).unwrap(),
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn scenarios_are_deterministic_and_bounded(seed in any::<u64>(), n_real in 1usize..4) {
        let p = params();
        let cfg = ScenarioConfig::default();
        let a = sample_scenarios(&p.load_res, &p.exchange, n_real, &[44.0, 52.0], seed, &cfg).unwrap();
        let b = sample_scenarios(&p.load_res, &p.exchange, n_real, &[44.0, 52.0], seed, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 2 * n_real);
        for s in &a {
            for t in 0..s.len() {
                let w = s.disturbance(t);
                prop_assert!(w.p_res >= p.load_res.p_res_min && w.p_res <= p.load_res.p_res_max);
                prop_assert!(w.p_load >= p.load_res.p_load_min && w.p_load <= p.load_res.p_load_max);
                prop_assert!(s.c_p[t] >= s.c_s[t] && s.c_s[t] >= 0.0);
            }
        }
    }

    #[test]
    fn aggregate_res_is_pv_plus_wind(seed in any::<u64>()) {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = sample_realization(&ScenarioConfig::default(), &p.load_res, &mut rng);
        for (t, v) in r.res().into_iter().enumerate() {
            prop_assert_eq!(v, r.pv[t] + r.wind[t]);
        }
    }

    #[test]
    fn forecast_error_stays_in_its_band(seed in any::<u64>(), t in 0usize..42) {
        let p = params();
        let s = &sample_scenarios(&p.load_res, &p.exchange, 1, &[50.0], seed, &ScenarioConfig::default()).unwrap()[0];
        let fc = ForecastConfig::default_for(6);
        prop_assert!(fc.rel_band.windows(2).all(|w| w[0] <= w[1]));
        let w = forecast(s, t, 6, &fc, &p.load_res).unwrap();
        prop_assert_eq!(&w, &forecast(s, t, 6, &fc, &p.load_res).unwrap());
        for (k, f) in w.iter().enumerate() {
            let truth = s.disturbance(t + k);
            prop_assert!((f.p_load - truth.p_load).abs() <= fc.rel_band[k] * truth.p_load + 1e-12);
            prop_assert!((f.p_res - truth.p_res).abs() <= fc.rel_band[k] * truth.p_res + 1e-12);
        }
    }

    #[test]
    fn feature_length_and_purity(seed in any::<u64>(), n_beta in 2usize..5, t_w in 0usize..7) {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let info = random_info(&p, 6, &mut rng);
        let fcfg = FeatureConfig { n_beta, t_w };
        let f = build_features(&p, &info, &fcfg).unwrap();
        prop_assert_eq!(f.len(), 1 + 2 + 12 + n_beta * t_w);
        let g = build_features(&p, &info, &fcfg).unwrap();
        prop_assert!(f.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn model_json_round_trip_is_bit_exact(seed in any::<u64>()) {
        let m = random_model(seed, FeatureConfig::default()).model;
        let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        prop_assert!(m.params.values().zip(back.params.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back, m);
    }

    #[test]
    fn loss_is_additive_over_samples(seed in any::<u64>(), k in 1usize..6) {
        let m = random_model(seed, FeatureConfig::default()).model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let xs: Vec<Vec<f64>> = (0..k).map(|_| (0..33).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let (total, _) = loss_and_grad(&m.params, &xs, &ys).unwrap();
        let parts: f64 = (0..k).map(|i| loss_and_grad(&m.params, &xs[i..=i], &ys[i..=i]).unwrap().0).sum();
        prop_assert!((total - parts).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn learned_policy_acts_inside_the_box_with_exact_balance(seed in any::<u64>(), scen in any::<u64>()) {
        let p = params();
        let pol = random_model(seed, FeatureConfig::default());
        let s = &sample_scenarios(&p.load_res, &p.exchange, 1, &[44.0], scen, &ScenarioConfig::default()).unwrap()[0];
        let mut ctrl = LearnedController::new("random", pol);
        let ep = simulate_episode(&mut ctrl, s, &p, &SimConfig::new(6)).unwrap();
        prop_assert_eq!(ep.steps.len(), 24);
        for r in &ep.steps {
            prop_assert!(input_box(&p, &r.state, BoxMode::AdjoinOff).unwrap().contains(&r.u, BOX_TOL));
            prop_assert!(r.balance_residual.abs() <= 1e-9);
        }
        let recomputed: f64 = ep.steps.iter().map(|r| r.cost.total()).sum();
        prop_assert!((recomputed - ep.j_eco).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn noisy_labels_stay_in_the_box(seed in any::<u64>(), noise_seed in any::<u64>(), strict in any::<bool>()) {
        let p = params();
        let mut cfg = EmpcConfig::new(&p, 6);
        cfg.box_mode = if strict { BoxMode::Strict } else { BoxMode::AdjoinOff };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let info = random_info(&p, 6, &mut rng);
        let noise = NoiseConfig::default_for(&p, noise_seed).scaled(3.0);
        let a = noisy_expert_action(&p, &info, &cfg, &noise, 0, 0).unwrap();
        let state = GridState { soc: info.soc0, prev_gen_power: info.prev_gen_power.clone(), prev_gen_on: info.prev_gen_on.clone() };
        prop_assert!(input_box(&p, &state, cfg.box_mode).unwrap().contains(&a.applied, BOX_TOL));
    }

    #[test]
    fn branch_and_bound_matches_enumeration(seed in any::<u64>(), horizon in 1usize..3) {
        let p = params();
        let cfg = EmpcConfig::new(&p, horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let info = random_info(&p, horizon, &mut rng);
        let prob = build_empc_miqp(&p, &info, &cfg).unwrap();
        let opts = cfg.solver_options();
        let bb = solve_bnb(&prob, &opts);
        let en = solve_enumerate(&prob, &SolverOptions::default()).unwrap();
        prop_assert_eq!(bb.incumbent.is_some(), en.incumbent.is_some());
        if let Some(x) = &bb.incumbent {
            prop_assert!((bb.objective - en.objective).abs() <= 1e-6 * en.objective.abs().max(1.0));
            let plan = decode(2, horizon, x);
            prop_assert!((reprice(&p, &info, &cfg, &plan).unwrap() - bb.objective).abs() <= 1e-6);
        }
    }
}
