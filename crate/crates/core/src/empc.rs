//! Economic MPC as a mixed-integer QP, and the expert policy that applies
//! its first-stage input.
//!
//! Column layout, per stage `k` (stage-major):
//!
//! ```text
//! P_fg[0..N], P_exg, beta, P_ess, z_ess, z_exg     continuous
//! d_fg[0..N], d_ess, d_exg, z_fg[0..N]             binary
//! ```
//!
//! followed by the SoC states `x@0 ..= x@T`.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::grid::{
    clip_to_box, input_box, stage_cost_breakdown, BoxMode, ControlInput, Disturbance, GridState,
    MicrogridParams, PriceSample, TOL_ON,
};
use crate::miqp::{column_name, solve_bnb, BnbResult, BnbStatus, Branching, Layout, MiqpProblem, SolverOptions};

/// Everything one MPC solve depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoTuple {
    pub soc0: f64,
    pub prev_gen_power: Vec<f64>,
    pub prev_gen_on: Vec<bool>,
    /// Predicted disturbances for `t .. t+T-1`.
    pub forecasts: Vec<Disturbance>,
}

impl InfoTuple {
    pub fn new(state: &GridState, forecasts: Vec<Disturbance>) -> Self {
        InfoTuple {
            soc0: state.soc,
            prev_gen_power: state.prev_gen_power.clone(),
            prev_gen_on: state.prev_gen_on.clone(),
            forecasts,
        }
    }

    pub fn state(&self) -> GridState {
        GridState {
            soc: self.soc0,
            prev_gen_power: self.prev_gen_power.clone(),
            prev_gen_on: self.prev_gen_on.clone(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.forecasts.len()
    }

    pub fn check(&self, params: &MicrogridParams, horizon: usize) -> Result<()> {
        if self.forecasts.len() != horizon {
            return Err(Error::Shape(format!(
                "{} forecasts for horizon {horizon}",
                self.forecasts.len()
            )));
        }
        if self.forecasts.iter().any(|w| !w.p_res.is_finite() || !w.p_load.is_finite()) || !self.soc0.is_finite() {
            return Err(Error::Contract("non-finite information tuple".into()));
        }
        self.state().check(params)
    }
}

#[derive(Debug, Clone)]
pub struct EmpcConfig {
    pub horizon: usize,
    /// Prices assumed by the predictor.
    pub prices: PriceSample,
    pub mip_gap: f64,
    pub time_limit: Duration,
    pub branching: Branching,
    /// Ramp rows become `|dP| <= dp * max(d(t), d(t-1))`, letting an ON generator shut down.
    pub allow_shutdown: bool,
    /// Input set the expert output is projected onto.
    pub box_mode: BoxMode,
}

impl EmpcConfig {
    pub fn new(params: &MicrogridParams, horizon: usize) -> Self {
        EmpcConfig {
            horizon,
            prices: PriceSample::nominal(&params.exchange),
            mip_gap: 1e-6,
            time_limit: Duration::from_secs(30),
            branching: Branching::MostFractional,
            allow_shutdown: false,
            box_mode: BoxMode::AdjoinOff,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            mip_gap: self.mip_gap,
            time_limit: self.time_limit,
            branching: self.branching,
            ..SolverOptions::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        if !(self.mip_gap >= 0.0) {
            return Err(Error::Contract("mip_gap must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Column indices of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCols {
    pub p_fg: Vec<usize>,
    pub p_exg: usize,
    pub beta: usize,
    pub p_ess: usize,
    pub z_ess: usize,
    pub z_exg: usize,
    pub d_fg: Vec<usize>,
    pub d_ess: usize,
    pub d_exg: usize,
    pub z_fg: Vec<usize>,
}

/// Column map of an MPC problem with `n_gen` generators and horizon `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpcIndex {
    pub stages: Vec<StageCols>,
    pub soc: Vec<usize>,
}

impl EmpcIndex {
    pub fn new(n_gen: usize, horizon: usize) -> Self {
        let n = n_gen;
        let block = 3 * n + 7;
        let stages = (0..horizon)
            .map(|k| {
                let b = k * block;
                StageCols {
                    p_fg: (0..n).map(|i| b + i).collect(),
                    p_exg: b + n,
                    beta: b + n + 1,
                    p_ess: b + n + 2,
                    z_ess: b + n + 3,
                    z_exg: b + n + 4,
                    d_fg: (0..n).map(|i| b + n + 5 + i).collect(),
                    d_ess: b + 2 * n + 5,
                    d_exg: b + 2 * n + 6,
                    z_fg: (0..n).map(|i| b + 2 * n + 7 + i).collect(),
                }
            })
            .collect();
        let soc = (0..=horizon).map(|k| horizon * block + k).collect();
        EmpcIndex { stages, soc }
    }

    pub fn n_vars(&self) -> usize {
        self.soc[self.soc.len() - 1] + 1
    }

    fn layout(&self) -> Layout {
        let mut names = vec![String::new(); self.n_vars()];
        for (k, s) in self.stages.iter().enumerate() {
            for (i, (&p, (&d, &z))) in s.p_fg.iter().zip(s.d_fg.iter().zip(&s.z_fg)).enumerate() {
                names[p] = column_name("P_fg", Some(i), k);
                names[d] = column_name("d_fg", Some(i), k);
                names[z] = column_name("z_fg", Some(i), k);
            }
            for (col, sym) in [
                (s.p_exg, "P_exg"),
                (s.beta, "beta"),
                (s.p_ess, "P_ess"),
                (s.z_ess, "z_ess"),
                (s.z_exg, "z_exg"),
                (s.d_ess, "d_ess"),
                (s.d_exg, "d_exg"),
            ] {
                names[col] = column_name(sym, None, k);
            }
        }
        for (k, &c) in self.soc.iter().enumerate() {
            names[c] = column_name("x", None, k);
        }
        Layout::from_names(names).expect("generated column names are unique")
    }
}

/// SoC bounds enforced at lookahead `k >= 1`.
///
/// Inside `[soc_min, soc_max]` these are the plain bounds. After an excursion
/// (caused by forecast error or injected noise) the violated bound is relaxed
/// to the best value reachable at full storage power, so the problem stays
/// feasible and the plan drives SoC back as fast as possible.
pub fn soc_bounds(params: &MicrogridParams, soc0: f64, k: usize) -> (f64, f64) {
    let e = &params.ess;
    let steps = k as f64 * params.ts;
    let fastest_up = soc0 + steps * (e.eta_c * e.p_max - e.x_dg);
    let fastest_down = soc0 + steps * (-e.p_max / e.eta_d - e.x_dg);
    (e.soc_min.min(fastest_up), e.soc_max.max(fastest_down))
}

/// Builds the MPC problem for one information tuple.
pub fn build_empc_miqp(params: &MicrogridParams, info: &InfoTuple, cfg: &EmpcConfig) -> Result<MiqpProblem> {
    params.ensure_valid()?;
    cfg.check()?;
    info.check(params, cfg.horizon)?;
    let n = params.n_gen();
    let t_h = cfg.horizon;
    let idx = EmpcIndex::new(n, t_h);
    let mut p = MiqpProblem::with_layout(idx.layout());

    let e = &params.ess;
    let x = &params.exchange;
    let lr = &params.load_res;
    let ts = params.ts;
    let price = cfg.prices;

    for (k, s) in idx.stages.iter().enumerate() {
        let w = info.forecasts[k];
        for i in 0..n {
            p.set_binary(s.d_fg[i]);
            p.set_binary(s.z_fg[i]);
        }
        p.set_binary(s.d_ess);
        p.set_binary(s.d_exg);

        let mut bound = |col: usize, lo: f64, hi: f64| {
            p.lower[col] = lo;
            p.upper[col] = hi;
        };
        for (i, g) in params.generators.iter().enumerate() {
            bound(s.p_fg[i], 0.0, g.p_max);
        }
        bound(s.p_exg, -x.p_max, x.p_max);
        bound(s.z_exg, -x.p_max, x.p_max);
        bound(s.beta, 0.0, lr.beta_max);
        bound(s.p_ess, -e.p_max, e.p_max);
        bound(s.z_ess, -e.p_max, e.p_max);
        // every integer-feasible point has z = max(P, 0)
        p.lower[s.z_ess] = 0.0;
        p.lower[s.z_exg] = 0.0;

        // objective
        for (i, g) in params.generators.iter().enumerate() {
            p.c[s.p_fg[i]] += g.theta1;
            if g.theta2 != 0.0 {
                p.add_q(s.p_fg[i], s.p_fg[i], 2.0 * g.theta2);
            }
            p.c[s.d_fg[i]] += g.o_fg + g.s_on;
            p.c[s.z_fg[i]] -= g.s_on + g.s_off;
            if k == 0 {
                if info.prev_gen_on[i] {
                    p.const0 += g.s_off;
                }
            } else {
                p.c[idx.stages[k - 1].d_fg[i]] += g.s_off;
            }
        }
        p.c[s.z_ess] += 2.0 * e.o_ess;
        p.c[s.p_ess] -= e.o_ess;
        p.c[s.beta] += lr.rho * w.p_load;
        p.c[s.z_exg] += price.c_p - price.c_s;
        p.c[s.p_exg] += price.c_s;

        // bus balance
        let mut row: Vec<(usize, f64)> = s.p_fg.iter().map(|&c| (c, 1.0)).collect();
        row.extend([(s.p_exg, 1.0), (s.p_ess, -1.0), (s.beta, w.p_load)]);
        p.push_eq(row, w.p_load - w.p_res);

        // storage dynamics
        p.push_eq(
            vec![
                (idx.soc[k + 1], 1.0),
                (idx.soc[k], -1.0),
                (s.z_ess, -ts * (e.eta_c - 1.0 / e.eta_d)),
                (s.p_ess, -ts / e.eta_d),
            ],
            -ts * e.x_dg,
        );

        for (i, g) in params.generators.iter().enumerate() {
            let (pc, dc, zc) = (s.p_fg[i], s.d_fg[i], s.z_fg[i]);
            // ON logic through the output range
            p.push_le(vec![(dc, g.p_min), (pc, -1.0)], 0.0);
            p.push_le(vec![(pc, 1.0), (dc, -g.p_max)], 0.0);

            // ramp limits; the previous stage is data at k = 0
            let prev = if k == 0 { None } else { Some((idx.stages[k - 1].p_fg[i], idx.stages[k - 1].d_fg[i])) };
            let prev_on = f64::from(u8::from(info.prev_gen_on[i]));
            for sign in [1.0, -1.0] {
                let mut row = vec![(pc, sign), (dc, -g.dp_max)];
                let mut rhs = 0.0;
                match prev {
                    Some((pp, _)) => row.push((pp, -sign)),
                    None => rhs += sign * info.prev_gen_power[i],
                }
                if cfg.allow_shutdown {
                    row.push((zc, g.dp_max));
                    match prev {
                        Some((_, pd)) => row.push((pd, -g.dp_max)),
                        None => rhs += g.dp_max * prev_on,
                    }
                }
                p.push_le(row, rhs);
            }

            if !cfg.allow_shutdown {
                // implied by the literal ramp rows: an ON generator cannot reach 0
                match prev {
                    Some((_, pd)) => p.push_le(vec![(pd, 1.0), (dc, -1.0)], 0.0),
                    None if info.prev_gen_on[i] => p.lower[dc] = 1.0,
                    None => {}
                }
            }

            // z_fg = d(k) d(k-1)
            p.push_le(vec![(zc, 1.0), (dc, -1.0)], 0.0);
            match prev {
                Some((_, pd)) => {
                    p.push_le(vec![(zc, 1.0), (pd, -1.0)], 0.0);
                    p.push_le(vec![(pd, 1.0), (dc, 1.0), (zc, -1.0)], 1.0);
                }
                None => {
                    p.push_le(vec![(zc, 1.0)], prev_on);
                    p.push_le(vec![(dc, 1.0), (zc, -1.0)], 1.0 - prev_on);
                }
            }
        }

        // z = d P products and sign links for storage and exchange
        for (pc, zc, dc, m) in [(s.p_ess, s.z_ess, s.d_ess, e.p_max), (s.p_exg, s.z_exg, s.d_exg, x.p_max)] {
            p.push_le(vec![(zc, 1.0), (dc, -m)], 0.0);
            p.push_le(vec![(zc, -1.0), (dc, -m)], 0.0);
            p.push_le(vec![(pc, 1.0), (zc, -1.0), (dc, m)], m);
            p.push_le(vec![(zc, 1.0), (pc, -1.0), (dc, m)], m);
            p.push_le(vec![(pc, 1.0), (dc, -m)], 0.0);
            p.push_le(vec![(pc, -1.0), (dc, m)], m);
            p.push_le(vec![(pc, 1.0), (zc, -1.0)], 0.0);
        }
    }

    p.lower[idx.soc[0]] = info.soc0;
    p.upper[idx.soc[0]] = info.soc0;
    for k in 1..=t_h {
        let (lo, hi) = soc_bounds(params, info.soc0, k);
        p.lower[idx.soc[k]] = lo;
        p.upper[idx.soc[k]] = hi;
    }
    Ok(p)
}

/// Planned trajectory decoded from a solution vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpcPlan {
    pub inputs: Vec<ControlInput>,
    pub gen_on: Vec<Vec<bool>>,
    pub p_ess: Vec<f64>,
    pub ess_charging: Vec<bool>,
    pub importing: Vec<bool>,
    pub z_ess: Vec<f64>,
    pub z_exg: Vec<f64>,
    pub z_fg: Vec<Vec<bool>>,
    /// `x@0 ..= x@T`.
    pub soc: Vec<f64>,
}

pub fn decode(n_gen: usize, horizon: usize, x: &[f64]) -> EmpcPlan {
    let idx = EmpcIndex::new(n_gen, horizon);
    let bit = |v: f64| v > 0.5;
    let mut plan = EmpcPlan {
        inputs: Vec::with_capacity(horizon),
        gen_on: Vec::with_capacity(horizon),
        p_ess: Vec::with_capacity(horizon),
        ess_charging: Vec::with_capacity(horizon),
        importing: Vec::with_capacity(horizon),
        z_ess: Vec::with_capacity(horizon),
        z_exg: Vec::with_capacity(horizon),
        z_fg: Vec::with_capacity(horizon),
        soc: idx.soc.iter().map(|&c| x[c]).collect(),
    };
    for s in &idx.stages {
        let on: Vec<bool> = s.d_fg.iter().map(|&c| bit(x[c])).collect();
        // an OFF generator is exactly 0 up to solver round-off
        let gen_power = s
            .p_fg
            .iter()
            .zip(&on)
            .map(|(&c, &o)| if o { x[c] } else { 0.0 })
            .collect();
        plan.inputs.push(ControlInput {
            gen_power,
            p_exg: x[s.p_exg],
            beta: x[s.beta].max(0.0),
        });
        plan.gen_on.push(on);
        plan.p_ess.push(x[s.p_ess]);
        plan.ess_charging.push(bit(x[s.d_ess]));
        plan.importing.push(bit(x[s.d_exg]));
        plan.z_ess.push(x[s.z_ess]);
        plan.z_exg.push(x[s.z_exg]);
        plan.z_fg.push(s.z_fg.iter().map(|&c| bit(x[c])).collect());
    }
    plan
}

/// Cost of a decoded plan evaluated with the plain (non-reformulated)
/// stage costs, the forecasts of `info`, and the predictor prices.
pub fn reprice(params: &MicrogridParams, info: &InfoTuple, cfg: &EmpcConfig, plan: &EmpcPlan) -> Result<f64> {
    let mut state = info.state();
    let mut total = 0.0;
    for (k, u) in plan.inputs.iter().enumerate() {
        let w = info.forecasts[k];
        total += stage_cost_breakdown(params, &state, u, w, cfg.prices)?.total();
        state = GridState {
            soc: plan.soc[k + 1],
            prev_gen_on: u.gen_power.iter().map(|&p| p > TOL_ON).collect(),
            prev_gen_power: u.gen_power.clone(),
        };
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct EmpcSolution {
    pub plan: EmpcPlan,
    pub x: Vec<f64>,
    pub objective: f64,
    pub gap: f64,
    pub nodes: usize,
    pub status: BnbStatus,
    /// Wall time of the branch-and-bound call alone.
    pub solve_time: Duration,
}

/// Builds and solves the MPC problem.
pub fn solve_empc(params: &MicrogridParams, info: &InfoTuple, cfg: &EmpcConfig) -> Result<EmpcSolution> {
    let p = build_empc_miqp(params, info, cfg)?;
    let opts = cfg.solver_options();
    let start = Instant::now();
    let res = solve_bnb(&p, &opts);
    let solve_time = start.elapsed();
    finish(params, info, cfg, res, solve_time)
}

fn finish(
    params: &MicrogridParams,
    info: &InfoTuple,
    cfg: &EmpcConfig,
    res: BnbResult,
    solve_time: Duration,
) -> Result<EmpcSolution> {
    let Some(x) = res.incumbent else {
        return match res.status {
            BnbStatus::Infeasible => Err(Error::Infeasible {
                stage: first_conflicting_stage(params, info, cfg),
            }),
            s => Err(Error::Solver(format!("no incumbent found ({s:?}) after {} nodes", res.nodes_explored))),
        };
    };
    if res.status != BnbStatus::Optimal {
        log::warn!(
            "empc: {:?} reached, using incumbent with gap {:.3e}",
            res.status,
            res.gap
        );
    }
    Ok(EmpcSolution {
        plan: decode(params.n_gen(), cfg.horizon, &x),
        x,
        objective: res.objective,
        gap: res.gap,
        nodes: res.nodes_explored,
        status: res.status,
        solve_time,
    })
}

/// First stage at which the horizon-truncated problem becomes infeasible.
pub fn first_conflicting_stage(params: &MicrogridParams, info: &InfoTuple, cfg: &EmpcConfig) -> Option<usize> {
    (1..=cfg.horizon).find_map(|h| {
        let mut c = cfg.clone();
        c.horizon = h;
        let mut i = info.clone();
        i.forecasts.truncate(h);
        let p = build_empc_miqp(params, &i, &c).ok()?;
        let r = solve_bnb(&p, &c.solver_options());
        (r.status == BnbStatus::Infeasible).then_some(h - 1)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub solve_time: Duration,
    pub objective: f64,
    pub gap: f64,
    pub nodes: usize,
}

/// First-stage expert input, projected onto the input box of the current state.
pub fn expert_action(
    params: &MicrogridParams,
    info: &InfoTuple,
    cfg: &EmpcConfig,
) -> Result<(ControlInput, SolveStats)> {
    let sol = solve_empc(params, info, cfg)?;
    let bx = input_box(params, &info.state(), cfg.box_mode)?;
    let u = clip_to_box(&sol.plan.inputs[0], &bx);
    Ok((
        u,
        SolveStats {
            solve_time: sol.solve_time,
            objective: sol.objective,
            gap: sol.gap,
            nodes: sol.nodes,
        },
    ))
}

/// The expert as a reusable controller; accumulates solve statistics.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub params: MicrogridParams,
    pub cfg: EmpcConfig,
    pub stats: Vec<SolveStats>,
}

pub fn empc_policy_closure(params: &MicrogridParams, cfg: &EmpcConfig) -> ExpertPolicy {
    ExpertPolicy {
        params: params.clone(),
        cfg: cfg.clone(),
        stats: Vec::new(),
    }
}

impl ExpertPolicy {
    pub fn act(&mut self, state: &GridState, forecasts: &[Disturbance]) -> Result<ControlInput> {
        let info = InfoTuple::new(state, forecasts.to_vec());
        let (u, st) = expert_action(&self.params, &info, &self.cfg)?;
        self.stats.push(st);
        Ok(u)
    }
}

/// Random admissible information tuple: SoC inside its bounds, a consistent
/// previous generator state, and forecasts inside the disturbance bounds.
pub fn random_info<R: rand::Rng + ?Sized>(params: &MicrogridParams, horizon: usize, rng: &mut R) -> InfoTuple {
    let e = &params.ess;
    let lr = &params.load_res;
    let mut prev_gen_power = Vec::with_capacity(params.n_gen());
    let mut prev_gen_on = Vec::with_capacity(params.n_gen());
    for g in &params.generators {
        let on = rng.random_bool(0.5);
        prev_gen_on.push(on);
        prev_gen_power.push(if on { rng.random_range(g.p_min..=g.p_max) } else { 0.0 });
    }
    let forecasts = (0..horizon)
        .map(|_| Disturbance {
            p_res: rng.random_range(lr.p_res_min..=lr.p_res_max),
            p_load: rng.random_range(lr.p_load_min..=lr.p_load_max),
        })
        .collect();
    InfoTuple {
        soc0: rng.random_range(e.soc_min..=e.soc_max),
        prev_gen_power,
        prev_gen_on,
        forecasts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miqp::solve_enumerate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference() -> MicrogridParams {
        MicrogridParams::reference()
    }

    fn info_const(soc0: f64, n: usize, w: Disturbance, horizon: usize) -> InfoTuple {
        InfoTuple {
            soc0,
            prev_gen_power: vec![0.0; n],
            prev_gen_on: vec![false; n],
            forecasts: vec![w; horizon],
        }
    }

    fn enumerate_obj(p: &MiqpProblem) -> f64 {
        solve_enumerate(p, &SolverOptions::default()).unwrap().objective
    }

    #[test]
    fn variable_counts_horizon_six() {
        let params = reference();
        let cfg = EmpcConfig::new(&params, 6);
        let info = info_const(50.0, 2, Disturbance { p_res: 40.0, p_load: 80.0 }, 6);
        let p = build_empc_miqp(&params, &info, &cfg).unwrap();
        assert_eq!(p.n_binary(), 36);
        let soc_cols = (0..=6).filter(|&k| p.layout.col("x", None, k).is_some()).count();
        assert_eq!(soc_cols, 7);
        assert_eq!(p.n_cont, 42 + 7);
        assert_eq!(p.n_vars(), 6 * 13 + 7);
        p.check_well_formed().unwrap();
    }

    #[test]
    fn variable_counts_horizon_one() {
        let params = reference();
        let cfg = EmpcConfig::new(&params, 1);
        let info = info_const(50.0, 2, Disturbance { p_res: 40.0, p_load: 80.0 }, 1);
        let p = build_empc_miqp(&params, &info, &cfg).unwrap();
        assert_eq!(p.n_binary(), 6);
        assert_eq!(p.n_cont - 7, 2);
    }

    #[test]
    fn index_agrees_with_layout_names() {
        let idx = EmpcIndex::new(2, 3);
        let layout = idx.layout();
        for (k, s) in idx.stages.iter().enumerate() {
            assert_eq!(layout.col("P_fg", Some(1), k), Some(s.p_fg[1]));
            assert_eq!(layout.col("z_fg", Some(0), k), Some(s.z_fg[0]));
            assert_eq!(layout.col("P_exg", None, k), Some(s.p_exg));
            assert_eq!(layout.col("d_exg", None, k), Some(s.d_exg));
            assert_eq!(layout.col("beta", None, k), Some(s.beta));
        }
        assert_eq!(layout.col("x", None, 3), Some(idx.soc[3]));
        assert_eq!(layout.len(), idx.n_vars());
    }

    #[test]
    fn balanced_forecast_idles_at_zero_cost() {
        let mut params = reference();
        params.exchange.c_s = 0.02; // below the storage throughput cost
        let mut cfg = EmpcConfig::new(&params, 2);
        cfg.prices = PriceSample::nominal(&params.exchange);
        let info = info_const(60.0, 2, Disturbance { p_res: 70.0, p_load: 70.0 }, 2);
        let p = build_empc_miqp(&params, &info, &cfg).unwrap();
        assert!(enumerate_obj(&p).abs() < 1e-9);
        let sol = solve_empc(&params, &info, &cfg).unwrap();
        assert!(sol.objective.abs() < 1e-9);
        let u = &sol.plan.inputs[0];
        assert!(u.gen_power.iter().all(|&v| v == 0.0));
        assert!(u.p_exg.abs() < 1e-7 && u.beta.abs() < 1e-9);
    }

    #[test]
    fn cheap_grid_covers_deficit() {
        let mut params = reference();
        params.exchange.c_p = 0.05;
        params.exchange.c_s = 0.0;
        let cfg = EmpcConfig::new(&params, 2);
        let info = info_const(50.0, 2, Disturbance { p_res: 10.0, p_load: 100.0 }, 2);
        let p = build_empc_miqp(&params, &info, &cfg).unwrap();
        let sol = solve_empc(&params, &info, &cfg).unwrap();
        assert!((sol.objective - enumerate_obj(&p)).abs() < 1e-6);
        for u in &sol.plan.inputs {
            assert!(u.gen_power.iter().all(|&v| v == 0.0));
            assert!(u.p_exg > 0.0);
        }
    }

    #[test]
    fn free_export_absorbs_surplus_with_full_storage() {
        let mut params = reference();
        params.exchange.c_s = 0.0;
        let cfg = EmpcConfig::new(&params, 2);
        let info = info_const(params.ess.soc_max, 2, Disturbance { p_res: 110.0, p_load: 40.0 }, 2);
        let p = build_empc_miqp(&params, &info, &cfg).unwrap();
        let sol = solve_empc(&params, &info, &cfg).unwrap();
        assert!((sol.objective - enumerate_obj(&p)).abs() < 1e-6);
        let load_term: f64 = sol
            .plan
            .inputs
            .iter()
            .zip(&info.forecasts)
            .map(|(u, w)| params.load_res.rho * u.beta * w.p_load)
            .sum();
        assert!((sol.objective - load_term).abs() < 1e-6, "{} vs {load_term}", sol.objective);
        assert!(sol.plan.inputs.iter().all(|u| u.p_exg < 0.0));
    }

    #[test]
    fn random_instances_decode_consistently() {
        let params = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..30 {
            let t_h = 1 + trial % 2;
            let mut cfg = EmpcConfig::new(&params, t_h);
            cfg.allow_shutdown = trial % 3 == 0;
            let info = random_info(&params, t_h, &mut rng);
            let p = build_empc_miqp(&params, &info, &cfg).unwrap();
            let sol = solve_empc(&params, &info, &cfg).unwrap();
            let oracle = enumerate_obj(&p);
            assert!(
                (sol.objective - oracle).abs() <= 1e-6 * oracle.abs().max(1.0),
                "trial {trial}: {} vs {oracle}",
                sol.objective
            );
            let repriced = reprice(&params, &info, &cfg, &sol.plan).unwrap();
            assert!((repriced - sol.objective).abs() < 1e-6, "trial {trial}: {repriced} vs {}", sol.objective);
            let plan = &sol.plan;
            for k in 0..t_h {
                let d_ess = f64::from(u8::from(plan.ess_charging[k]));
                let d_exg = f64::from(u8::from(plan.importing[k]));
                assert!((plan.z_ess[k] - d_ess * plan.p_ess[k]).abs() < 1e-6);
                assert!((plan.z_exg[k] - d_exg * plan.inputs[k].p_exg).abs() < 1e-6);
                for i in 0..2 {
                    let prev = if k == 0 { info.prev_gen_on[i] } else { plan.gen_on[k - 1][i] };
                    assert_eq!(plan.z_fg[k][i], plan.gen_on[k][i] && prev);
                    assert_eq!(plan.gen_on[k][i], plan.inputs[k].gen_power[i] > TOL_ON);
                }
                assert!(plan.p_ess[k] <= 1e-7 || plan.ess_charging[k]);
                assert!(plan.p_ess[k] >= -1e-7 || !plan.ess_charging[k]);
                assert!(plan.inputs[k].p_exg <= 1e-7 || plan.importing[k]);
                assert!(plan.inputs[k].p_exg >= -1e-7 || !plan.importing[k]);
            }
        }
    }

    #[test]
    fn larger_curtail_bound_never_costs_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let base = reference();
            let info = random_info(&base, 3, &mut rng);
            let mut last = f64::INFINITY;
            for beta_max in [0.0, 0.1, 0.2, 0.3] {
                let mut params = base.clone();
                params.load_res.beta_max = beta_max;
                if !crate::grid::validate_params(&params).is_empty() {
                    continue;
                }
                let cfg = EmpcConfig::new(&params, 3);
                let obj = solve_empc(&params, &info, &cfg).unwrap().objective;
                assert!(obj <= last + 1e-6, "beta_max {beta_max}: {obj} > {last}");
                last = obj;
            }
        }
    }

    #[test]
    fn literal_ramp_rows_keep_an_on_generator_on() {
        let params = reference();
        let mut info = info_const(50.0, 2, Disturbance { p_res: 30.0, p_load: 90.0 }, 3);
        info.prev_gen_on = vec![true, false];
        info.prev_gen_power = vec![15.0, 0.0];
        let mut cfg = EmpcConfig::new(&params, 3);
        let sol = solve_empc(&params, &info, &cfg).unwrap();
        assert!(sol.plan.gen_on.iter().all(|on| on[0]));
        cfg.allow_shutdown = true;
        let sol = solve_empc(&params, &info, &cfg).unwrap();
        // the grid is cheaper than running the generator
        assert!(!sol.plan.gen_on[0][0]);
    }

    #[test]
    fn expert_output_lies_in_box_and_repeats() {
        let params = reference();
        let cfg = EmpcConfig::new(&params, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let info = random_info(&params, 6, &mut rng);
        let (u1, s1) = expert_action(&params, &info, &cfg).unwrap();
        let (u2, _) = expert_action(&params, &info, &cfg).unwrap();
        assert_eq!(u1, u2);
        let bx = input_box(&params, &info.state(), cfg.box_mode).unwrap();
        assert!(bx.contains(&u1, 1e-9));
        assert!(s1.solve_time > Duration::ZERO);
    }

    #[test]
    fn infeasible_forecast_reports_stage() {
        let params = reference();
        let cfg = EmpcConfig::new(&params, 3);
        let mut info = info_const(50.0, 2, Disturbance { p_res: 30.0, p_load: 90.0 }, 3);
        info.forecasts[1].p_load = 2000.0;
        match solve_empc(&params, &info, &cfg) {
            Err(Error::Infeasible { stage }) => assert_eq!(stage, Some(1)),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn soc_bounds_relax_only_outside_the_band() {
        let params = reference();
        assert_eq!(soc_bounds(&params, 50.0, 3), (10.0, 90.0));
        assert_eq!(soc_bounds(&params, 5.0, 1), (10.0, 90.0));
        let (lo, hi) = soc_bounds(&params, -30.0, 1);
        assert!((lo - (-30.0 + 0.95 * 30.0 - 0.2)).abs() < 1e-12);
        assert_eq!(hi, 90.0);
    }
}
