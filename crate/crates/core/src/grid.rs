//! Microgrid physics and economics.
//!
//! Everything here is a pure function of its arguments. Units are kW, kWh,
//! hours and dollars; with `ts` in hours every cost is per sampling step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Generator power above this is read as ON.
pub const TOL_ON: f64 = 1e-9;

/// Slack used when checking box preconditions on values produced by a solver.
const TOL_BOUND: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    /// Linear fuel cost ($/kWh).
    pub theta1: f64,
    /// Quadratic fuel cost ($/kW^2 h).
    pub theta2: f64,
    /// Per-step cost while ON ($).
    pub o_fg: f64,
    pub s_on: f64,
    pub s_off: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Largest allowed change of output between consecutive steps (kW).
    pub dp_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EssParams {
    pub eta_c: f64,
    pub eta_d: f64,
    /// Constant energy loss (kWh per hour).
    pub x_dg: f64,
    /// Throughput cost ($/kWh).
    pub o_ess: f64,
    pub p_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeParams {
    /// Nominal purchase price ($/kWh).
    pub c_p: f64,
    /// Nominal sale price ($/kWh).
    pub c_s: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadResParams {
    /// Curtailment penalty ($/kWh).
    pub rho: f64,
    pub beta_max: f64,
    pub p_load_min: f64,
    pub p_load_max: f64,
    pub p_res_min: f64,
    pub p_res_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridParams {
    pub generators: Vec<GeneratorParams>,
    pub ess: EssParams,
    pub exchange: ExchangeParams,
    pub load_res: LoadResParams,
    /// Sampling period (h).
    pub ts: f64,
}

impl MicrogridParams {
    /// Two-generator reference plant used as the default configuration.
    pub fn reference() -> Self {
        let gen = |theta1, theta2, o_fg, s_on, s_off, p_max, dp_max| GeneratorParams {
            theta1,
            theta2,
            o_fg,
            s_on,
            s_off,
            p_min: 5.0,
            p_max,
            dp_max,
        };
        MicrogridParams {
            generators: vec![
                gen(0.30, 0.002, 1.0, 2.0, 1.0, 60.0, 20.0),
                gen(0.40, 0.003, 1.2, 2.5, 1.5, 80.0, 25.0),
            ],
            ess: EssParams {
                eta_c: 0.95,
                eta_d: 0.95,
                x_dg: 0.2,
                o_ess: 0.05,
                p_max: 30.0,
                soc_min: 10.0,
                soc_max: 90.0,
            },
            exchange: ExchangeParams {
                c_p: 0.20,
                c_s: 0.10,
                p_max: 150.0,
            },
            load_res: LoadResParams {
                rho: 0.8,
                beta_max: 0.3,
                p_load_min: 20.0,
                p_load_max: 150.0,
                p_res_min: 0.0,
                p_res_max: 120.0,
            },
            ts: 1.0,
        }
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    /// Parses a JSON config document. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    /// Fails with the full violation list when the parameters are unusable.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = validate_params(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v))
        }
    }
}

/// Returns every violated parameter predicate; empty means the set is usable.
pub fn validate_params(p: &MicrogridParams) -> Vec<String> {
    let mut v = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            v.push(what);
        }
    };

    let finite = |x: f64| x.is_finite();
    check(p.ts.is_finite() && p.ts > 0.0, format!("ts must be > 0 (got {})", p.ts));
    check(!p.generators.is_empty(), "at least one generator is required".into());

    for (i, g) in p.generators.iter().enumerate() {
        let all_finite = [g.theta1, g.theta2, g.o_fg, g.s_on, g.s_off, g.p_min, g.p_max, g.dp_max]
            .into_iter()
            .all(finite);
        check(all_finite, format!("generator {i}: non-finite field"));
        check(g.p_min > 0.0, format!("generator {i}: p_min must be > 0"));
        check(g.p_min <= g.p_max, format!("generator {i}: p_min > p_max"));
        check(
            g.p_min <= g.dp_max,
            format!("generator {i}: p_min > dp_max (startup would be impossible)"),
        );
        check(g.theta2 >= 0.0, format!("generator {i}: theta2 < 0 (non-convex)"));
        check(
            g.theta1 >= 0.0 && g.o_fg >= 0.0 && g.s_on >= 0.0 && g.s_off >= 0.0,
            format!("generator {i}: negative cost coefficient"),
        );
    }

    let e = &p.ess;
    check(e.eta_c > 0.0 && e.eta_c <= 1.0, "ess: eta_c outside (0,1]".into());
    check(e.eta_d > 0.0 && e.eta_d <= 1.0, "ess: eta_d outside (0,1]".into());
    check(e.soc_min < e.soc_max, "ess: soc_min >= soc_max".into());
    check(e.p_max > 0.0, "ess: p_max must be > 0".into());
    check(e.x_dg >= 0.0, "ess: x_dg < 0".into());
    check(e.o_ess >= 0.0, "ess: o_ess < 0".into());

    let x = &p.exchange;
    check(x.c_s >= 0.0, "exchange: c_s < 0".into());
    check(x.c_p >= x.c_s, "exchange: c_p < c_s (riskless arbitrage)".into());
    check(x.p_max > 0.0, "exchange: p_max must be > 0".into());

    let lr = &p.load_res;
    check(
        (0.0..=1.0).contains(&lr.beta_max),
        "load_res: beta_max outside [0,1]".into(),
    );
    check(lr.rho >= 0.0, "load_res: rho < 0".into());
    check(
        0.0 <= lr.p_load_min && lr.p_load_min <= lr.p_load_max,
        "load_res: load bounds inconsistent".into(),
    );
    check(
        0.0 <= lr.p_res_min && lr.p_res_min <= lr.p_res_max,
        "load_res: RES bounds inconsistent".into(),
    );

    if !p.generators.is_empty() {
        let sum_max: f64 = p.generators.iter().map(|g| g.p_max).sum();
        let sum_min: f64 = p.generators.iter().map(|g| g.p_min).sum();
        let lhs_a = sum_max + x.p_max;
        let rhs_a = e.p_max + lr.p_load_max - lr.p_res_min;
        check(
            lhs_a >= rhs_a,
            format!("viability (upper): {lhs_a} < {rhs_a}; demand can exceed supply"),
        );
        let lhs_b = sum_min - x.p_max;
        let rhs_b = -e.p_max + (1.0 - lr.beta_max) * lr.p_load_min - lr.p_res_max;
        check(
            lhs_b <= rhs_b,
            format!("viability (lower): {lhs_b} > {rhs_b}; surplus cannot be absorbed"),
        );
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub soc: f64,
    pub prev_gen_power: Vec<f64>,
    pub prev_gen_on: Vec<bool>,
}

impl GridState {
    /// Episode start: all generators OFF.
    pub fn initial(soc: f64, n_gen: usize) -> Self {
        GridState {
            soc,
            prev_gen_power: vec![0.0; n_gen],
            prev_gen_on: vec![false; n_gen],
        }
    }

    pub fn check(&self, params: &MicrogridParams) -> Result<()> {
        if self.prev_gen_power.len() != params.n_gen() || self.prev_gen_on.len() != params.n_gen() {
            return Err(Error::Shape(format!(
                "state has {} generator entries, plant has {}",
                self.prev_gen_power.len(),
                params.n_gen()
            )));
        }
        for (i, g) in params.generators.iter().enumerate() {
            let p = self.prev_gen_power[i];
            if self.prev_gen_on[i] {
                if p < g.p_min - TOL_BOUND || p > g.p_max + TOL_BOUND {
                    return contract(format!("generator {i} ON at {p} kW outside [p_min,p_max]"));
                }
            } else if p.abs() > TOL_ON {
                return contract(format!("generator {i} OFF but producing {p} kW"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub gen_power: Vec<f64>,
    /// Positive buys from the main grid, negative sells.
    pub p_exg: f64,
    pub beta: f64,
}

impl ControlInput {
    pub fn zeros(n_gen: usize) -> Self {
        ControlInput {
            gen_power: vec![0.0; n_gen],
            p_exg: 0.0,
            beta: 0.0,
        }
    }

    /// `[gen_power..., p_exg, beta]`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.gen_power.clone();
        v.push(self.p_exg);
        v.push(self.beta);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::Shape(format!("control vector of length {}", v.len())));
        }
        let n = v.len() - 2;
        Ok(ControlInput {
            gen_power: v[..n].to_vec(),
            p_exg: v[n],
            beta: v[n + 1],
        })
    }

    pub fn gen_on(&self) -> Vec<bool> {
        self.gen_power.iter().map(|&p| p > TOL_ON).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub p_res: f64,
    pub p_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceSample {
    pub c_p: f64,
    pub c_s: f64,
}

impl PriceSample {
    pub fn nominal(x: &ExchangeParams) -> Self {
        PriceSample {
            c_p: x.c_p,
            c_s: x.c_s,
        }
    }
}

pub fn generator_stage_cost(g: &GeneratorParams, p: f64, on: bool, prev_on: bool) -> Result<f64> {
    if on != (p > TOL_ON) {
        return contract(format!("generator status on={on} inconsistent with power {p} kW"));
    }
    let on_f = f64::from(u8::from(on));
    let prev_f = f64::from(u8::from(prev_on));
    Ok(g.theta1 * p
        + g.theta2 * p * p
        + g.o_fg * on_f
        + g.s_on * on_f * (1.0 - prev_f)
        + g.s_off * prev_f * (1.0 - on_f))
}

pub fn ess_stage_cost(e: &EssParams, p_ess: f64) -> Result<f64> {
    check_ess_bound(e, p_ess)?;
    Ok(e.o_ess * p_ess.abs())
}

pub fn load_stage_cost(lr: &LoadResParams, beta: f64, p_load: f64) -> Result<f64> {
    if !(-TOL_BOUND..=lr.beta_max + TOL_BOUND).contains(&beta) {
        return contract(format!("curtail fraction {beta} outside [0, {}]", lr.beta_max));
    }
    Ok(lr.rho * beta * p_load)
}

/// Purchase cost for imports, negative (revenue) for exports.
pub fn exchange_stage_cost(price: PriceSample, p_exg: f64) -> f64 {
    if p_exg >= 0.0 {
        price.c_p * p_exg
    } else {
        price.c_s * p_exg
    }
}

/// Storage power that closes the bus balance.
pub fn ess_power_from_balance(gen_power: &[f64], p_exg: f64, beta: f64, w: Disturbance) -> f64 {
    gen_power.iter().sum::<f64>() + w.p_res + p_exg - (1.0 - beta) * w.p_load
}

/// Bus balance residual: supply minus storage intake minus served load.
pub fn balance_residual(gen_power: &[f64], p_exg: f64, beta: f64, p_ess: f64, w: Disturbance) -> f64 {
    gen_power.iter().sum::<f64>() + w.p_res + p_exg - p_ess - (1.0 - beta) * w.p_load
}

pub fn ess_step(e: &EssParams, ts: f64, soc: f64, p_ess: f64) -> Result<f64> {
    check_ess_bound(e, p_ess)?;
    Ok(ess_step_unchecked(e, ts, soc, p_ess))
}

/// SoC update without the power bound check (used when a learned policy
/// drives the storage outside its rating and the excursion is only flagged).
pub fn ess_step_unchecked(e: &EssParams, ts: f64, soc: f64, p_ess: f64) -> f64 {
    if p_ess >= 0.0 {
        soc + ts * e.eta_c * p_ess - ts * e.x_dg
    } else {
        soc + ts * p_ess / e.eta_d - ts * e.x_dg
    }
}

fn check_ess_bound(e: &EssParams, p_ess: f64) -> Result<()> {
    if !p_ess.is_finite() || p_ess.abs() > e.p_max * (1.0 + 1e-9) + TOL_BOUND {
        return contract(format!("|P_ess| = {} exceeds rating {}", p_ess.abs(), e.p_max));
    }
    Ok(())
}

/// Costs of one step broken down by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub generators: f64,
    pub ess: f64,
    pub load: f64,
    pub exchange: f64,
}

impl StageCost {
    pub fn total(&self) -> f64 {
        self.generators + self.ess + self.load + self.exchange
    }
}

/// Sum of all component costs for one step; ON bits come from `u.gen_power`.
pub fn total_stage_cost(
    params: &MicrogridParams,
    state: &GridState,
    u: &ControlInput,
    w: Disturbance,
    price: PriceSample,
) -> Result<f64> {
    Ok(stage_cost_breakdown(params, state, u, w, price)?.total())
}

pub fn stage_cost_breakdown(
    params: &MicrogridParams,
    state: &GridState,
    u: &ControlInput,
    w: Disturbance,
    price: PriceSample,
) -> Result<StageCost> {
    if u.gen_power.len() != params.n_gen() {
        return Err(Error::Shape("control input generator count".into()));
    }
    let mut gens = 0.0;
    for (i, g) in params.generators.iter().enumerate() {
        let p = u.gen_power[i];
        gens += generator_stage_cost(g, p, p > TOL_ON, state.prev_gen_on[i])?;
    }
    let p_ess = ess_power_from_balance(&u.gen_power, u.p_exg, u.beta, w);
    Ok(StageCost {
        generators: gens,
        ess: ess_stage_cost(&params.ess, p_ess)?,
        load: load_stage_cost(&params.load_res, u.beta, w.p_load)?,
        exchange: exchange_stage_cost(price, u.p_exg),
    })
}

/// Outcome of one plant step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: GridState,
    pub p_ess: f64,
    /// Distance of the new SoC outside `[soc_min, soc_max]` (0 when inside).
    pub soc_excursion: f64,
    /// Storage power exceeded its rating and was applied anyway.
    pub ess_overload: bool,
}

/// Advances the augmented state `(soc, previous generator outputs)`.
///
/// SoC leaving its bounds is reported, not rejected: input clipping makes no
/// promise about state constraints.
pub fn augmented_step(
    params: &MicrogridParams,
    state: &GridState,
    u: &ControlInput,
    w: Disturbance,
) -> Result<StepOutcome> {
    if u.gen_power.len() != params.n_gen() {
        return Err(Error::Shape("control input generator count".into()));
    }
    let p_ess = ess_power_from_balance(&u.gen_power, u.p_exg, u.beta, w);
    let ess_overload = check_ess_bound(&params.ess, p_ess).is_err();
    let soc = ess_step_unchecked(&params.ess, params.ts, state.soc, p_ess);
    let e = &params.ess;
    let soc_excursion = (e.soc_min - soc).max(soc - e.soc_max).max(0.0);
    Ok(StepOutcome {
        next: GridState {
            soc,
            prev_gen_on: u.gen_on(),
            prev_gen_power: u.gen_power.clone(),
        },
        p_ess,
        soc_excursion,
        ess_overload,
    })
}

/// Admissible set of one generator's output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenAxis {
    pub lo: f64,
    pub hi: f64,
    /// OFF (exactly 0) is admissible in addition to `[lo, hi]`.
    pub allow_off: bool,
}

impl GenAxis {
    pub fn contains(&self, p: f64, tol: f64) -> bool {
        (self.allow_off && p.abs() <= tol) || (p >= self.lo - tol && p <= self.hi + tol)
    }

    /// Nearest admissible point; ties between OFF and the interval go to the interval.
    pub fn project(&self, p: f64) -> f64 {
        let c = p.clamp(self.lo, self.hi);
        if self.allow_off && p.abs() < (p - c).abs() {
            0.0
        } else {
            c
        }
    }
}

/// How the generator axes of the input box treat the OFF state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxMode {
    /// Adjoin `{0}` so a generator can always be switched OFF.
    #[default]
    AdjoinOff,
    /// Only the ramp-limited ON interval.
    Strict,
}

/// Axis-aligned input constraint set for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub gens: Vec<GenAxis>,
    pub exg: (f64, f64),
    pub beta: (f64, f64),
}

impl InputBox {
    pub fn contains(&self, u: &ControlInput, tol: f64) -> bool {
        u.gen_power.len() == self.gens.len()
            && self.gens.iter().zip(&u.gen_power).all(|(a, &p)| a.contains(p, tol))
            && u.p_exg >= self.exg.0 - tol
            && u.p_exg <= self.exg.1 + tol
            && u.beta >= self.beta.0 - tol
            && u.beta <= self.beta.1 + tol
    }
}

pub fn input_box(params: &MicrogridParams, state: &GridState, mode: BoxMode) -> Result<InputBox> {
    if state.prev_gen_power.len() != params.n_gen() {
        return Err(Error::Shape("state generator count".into()));
    }
    let mut gens = Vec::with_capacity(params.n_gen());
    for (i, g) in params.generators.iter().enumerate() {
        let prev = state.prev_gen_power[i];
        let lo = g.p_min.max(prev - g.dp_max);
        let hi = g.p_max.min(prev + g.dp_max);
        if lo > hi {
            return contract(format!("generator {i}: empty input interval [{lo}, {hi}]"));
        }
        gens.push(GenAxis {
            lo,
            hi,
            allow_off: mode == BoxMode::AdjoinOff,
        });
    }
    Ok(InputBox {
        gens,
        exg: (-params.exchange.p_max, params.exchange.p_max),
        beta: (0.0, params.load_res.beta_max),
    })
}

/// Per-coordinate projection onto the input box.
pub fn clip_to_box(u: &ControlInput, b: &InputBox) -> ControlInput {
    ControlInput {
        gen_power: b
            .gens
            .iter()
            .zip(&u.gen_power)
            .map(|(a, &p)| a.project(p))
            .collect(),
        p_exg: u.p_exg.clamp(b.exg.0, b.exg.1),
        beta: u.beta.clamp(b.beta.0, b.beta.1),
    }
}
