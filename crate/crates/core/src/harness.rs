//! Closed-loop simulation of controllers over scenario batches and comparison reports.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::empc::{expert_action, EmpcConfig, InfoTuple};
use crate::error::{Error, Result};
use crate::grid::{
    augmented_step, balance_residual, exchange_stage_cost, generator_stage_cost, load_stage_cost, ControlInput, Disturbance,
    GridState, MicrogridParams, PriceSample, StageCost, TOL_ON,
};
use crate::imitation::{fmt_f64, LearnedPolicy};
use crate::scenario::{forecast, ForecastConfig, Scenario};

/// Applied input and, when the controller measures it itself, the time spent
/// on the decision proper.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub u: ControlInput,
    pub compute_time: Option<Duration>,
}

pub trait Controller {
    fn name(&self) -> &str;
    fn decide(&mut self, params: &MicrogridParams, state: &GridState, forecasts: &[Disturbance]) -> Result<Decision>;
}

/// The MIQP expert; reports branch-and-bound time only, not problem construction.
#[derive(Debug, Clone)]
pub struct ExpertController {
    pub name: String,
    pub cfg: EmpcConfig,
}

impl ExpertController {
    pub fn new(cfg: EmpcConfig) -> Self {
        ExpertController { name: "expert".into(), cfg }
    }
}

impl Controller for ExpertController {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, params: &MicrogridParams, state: &GridState, forecasts: &[Disturbance]) -> Result<Decision> {
        let info = InfoTuple::new(state, forecasts.to_vec());
        let (u, stats) = expert_action(params, &info, &self.cfg)?;
        Ok(Decision {
            u,
            compute_time: Some(stats.solve_time),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LearnedController {
    pub name: String,
    pub policy: LearnedPolicy,
}

impl LearnedController {
    pub fn new(name: impl Into<String>, policy: LearnedPolicy) -> Self {
        LearnedController { name: name.into(), policy }
    }
}

impl Controller for LearnedController {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, params: &MicrogridParams, state: &GridState, forecasts: &[Disturbance]) -> Result<Decision> {
        Ok(Decision {
            u: self.policy.act(params, state, forecasts)?,
            compute_time: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_sim: usize,
    pub horizon: usize,
    pub forecast: ForecastConfig,
}

impl SimConfig {
    pub fn new(horizon: usize) -> Self {
        SimConfig {
            t_sim: 24,
            horizon,
            forecast: ForecastConfig::default_for(horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub state: GridState,
    pub u: ControlInput,
    pub w: Disturbance,
    pub price: PriceSample,
    pub p_ess: f64,
    pub cost: StageCost,
    /// Controller wall time in seconds.
    pub compute_time: f64,
    pub balance_residual: f64,
    pub soc_excursion: f64,
    pub ess_overload: bool,
}

impl StepRecord {
    pub fn soc_violation(&self) -> bool {
        self.soc_excursion > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub controller: String,
    pub scenario_id: usize,
    pub steps: Vec<StepRecord>,
    pub j_eco: f64,
    pub j_time: f64,
}

impl EpisodeResult {
    pub fn n_soc_violations(&self) -> usize {
        self.steps.iter().filter(|s| s.soc_violation()).count()
    }

    pub fn max_soc_excursion(&self) -> f64 {
        self.steps.iter().map(|s| s.soc_excursion).fold(0.0, f64::max)
    }

    pub fn n_ess_overloads(&self) -> usize {
        self.steps.iter().filter(|s| s.ess_overload).count()
    }

    pub fn max_balance_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.balance_residual.abs()).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            controller: self.controller.clone(),
            scenario_id: self.scenario_id,
            j_eco: self.j_eco,
            j_time: self.j_time,
            n_soc_violations: self.n_soc_violations(),
            max_soc_excursion: self.max_soc_excursion(),
        }
    }
}

/// Realized stage cost. The storage term is priced on the actual storage
/// power even when it exceeds the rating.
fn realized_cost(params: &MicrogridParams, state: &GridState, u: &ControlInput, w: Disturbance, price: PriceSample, p_ess: f64) -> Result<StageCost> {
    let mut gens = 0.0;
    for (i, g) in params.generators.iter().enumerate() {
        let p = u.gen_power[i];
        gens += generator_stage_cost(g, p, p > TOL_ON, state.prev_gen_on[i])?;
    }
    Ok(StageCost {
        generators: gens,
        ess: params.ess.o_ess * p_ess.abs(),
        load: load_stage_cost(&params.load_res, u.beta, w.p_load)?,
        exchange: exchange_stage_cost(price, u.p_exg),
    })
}

/// Receding-horizon run of `ctrl` on one scenario under true disturbances and
/// realized prices. State-bound excursions are recorded, never repaired.
pub fn simulate_episode(ctrl: &mut dyn Controller, s: &Scenario, params: &MicrogridParams, cfg: &SimConfig) -> Result<EpisodeResult> {
    if s.len() < cfg.t_sim + cfg.horizon {
        return Err(Error::Contract(format!(
            "scenario {} has {} steps, need {}",
            s.id,
            s.len(),
            cfg.t_sim + cfg.horizon
        )));
    }
    let mut state = GridState::initial(s.soc0, params.n_gen());
    let mut steps = Vec::with_capacity(cfg.t_sim);
    for t in 0..cfg.t_sim {
        let w_hat = forecast(s, t, cfg.horizon, &cfg.forecast, &params.load_res)?;
        let start = Instant::now();
        let d = ctrl.decide(params, &state, &w_hat)?;
        let wall = start.elapsed();
        let dt = d.compute_time.unwrap_or(wall).max(Duration::from_nanos(1));
        let w = s.disturbance(t);
        let price = s.price(t);
        let o = augmented_step(params, &state, &d.u, w)?;
        let cost = realized_cost(params, &state, &d.u, w, price, o.p_ess)?;
        steps.push(StepRecord {
            t,
            state: state.clone(),
            balance_residual: balance_residual(&d.u.gen_power, d.u.p_exg, d.u.beta, o.p_ess, w),
            u: d.u,
            w,
            price,
            p_ess: o.p_ess,
            cost,
            compute_time: dt.as_secs_f64(),
            soc_excursion: o.soc_excursion,
            ess_overload: o.ess_overload,
        });
        state = o.next;
    }
    let j_eco = steps.iter().map(|r| r.cost.total()).sum();
    let j_time = steps.iter().map(|r| r.compute_time).sum();
    Ok(EpisodeResult {
        controller: ctrl.name().to_string(),
        scenario_id: s.id,
        steps,
        j_eco,
        j_time,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub controller: String,
    pub scenario_id: usize,
    #[serde(rename = "J_eco")]
    pub j_eco: f64,
    #[serde(rename = "J_time")]
    pub j_time: f64,
    pub n_soc_violations: usize,
    pub max_soc_excursion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub controller: String,
    pub scenario_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
    pub n: usize,
}

impl Quartiles {
    /// Linear-interpolation quantiles; NaN entries are an error.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| v.is_nan()) {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Quartiles {
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            n: v.len(),
        })
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub episodes: usize,
    pub failures: usize,
    pub j_eco: Option<Quartiles>,
    pub j_time: Option<Quartiles>,
    /// Per-scenario ratios against the reference controller.
    pub eco_ratio: Option<Quartiles>,
    pub time_ratio: Option<Quartiles>,
    pub soc_violations: usize,
    pub max_soc_excursion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// Controller names in batch order; the first one is the ratio reference.
    pub controllers: Vec<String>,
    pub episodes: Vec<EpisodeResult>,
    pub failures: Vec<EpisodeFailure>,
}

impl ComparisonReport {
    pub fn reference(&self) -> &str {
        &self.controllers[0]
    }

    pub fn episodes_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a EpisodeResult> + 'a {
        self.episodes.iter().filter(move |e| e.controller == name)
    }

    pub fn rows(&self) -> Vec<EpisodeSummary> {
        self.episodes.iter().map(EpisodeResult::summary).collect()
    }

    pub fn summaries(&self) -> Vec<ControllerSummary> {
        summarize(&self.controllers, &self.rows(), &self.failures)
    }

    pub fn summary_of(&self, name: &str) -> Option<ControllerSummary> {
        self.summaries().into_iter().find(|s| s.controller == name)
    }
}

/// Controller statistics from per-episode rows; ratios pair each episode with
/// the reference controller's episode on the same scenario.
pub fn summarize(controllers: &[String], rows: &[EpisodeSummary], failures: &[EpisodeFailure]) -> Vec<ControllerSummary> {
    let reference = controllers.first();
    let ref_row = |id: usize| rows.iter().find(|r| Some(&r.controller) == reference && r.scenario_id == id);
    controllers
        .iter()
        .map(|name| {
            let mine: Vec<&EpisodeSummary> = rows.iter().filter(|r| &r.controller == name).collect();
            let mut eco_ratio = Vec::new();
            let mut time_ratio = Vec::new();
            for r in &mine {
                if let Some(b) = ref_row(r.scenario_id) {
                    eco_ratio.push(r.j_eco / b.j_eco);
                    time_ratio.push(r.j_time / b.j_time);
                }
            }
            ControllerSummary {
                controller: name.clone(),
                episodes: mine.len(),
                failures: failures.iter().filter(|f| &f.controller == name).count(),
                j_eco: Quartiles::of(&mine.iter().map(|r| r.j_eco).collect::<Vec<_>>()),
                j_time: Quartiles::of(&mine.iter().map(|r| r.j_time).collect::<Vec<_>>()),
                eco_ratio: Quartiles::of(&eco_ratio),
                time_ratio: Quartiles::of(&time_ratio),
                soc_violations: mine.iter().map(|r| r.n_soc_violations).sum(),
                max_soc_excursion: mine.iter().map(|r| r.max_soc_excursion).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Every controller on every scenario, one controller at a time. A failed
/// episode is recorded and the batch carries on.
pub fn run_batch(
    controllers: &mut [Box<dyn Controller>],
    scenarios: &[Scenario],
    params: &MicrogridParams,
    cfg: &SimConfig,
) -> Result<ComparisonReport> {
    if controllers.is_empty() || scenarios.is_empty() {
        return Err(Error::Contract("need at least one controller and one scenario".into()));
    }
    let mut report = ComparisonReport {
        controllers: controllers.iter().map(|c| c.name().to_string()).collect(),
        episodes: Vec::with_capacity(controllers.len() * scenarios.len()),
        failures: Vec::new(),
    };
    let mut seen = std::collections::HashSet::new();
    if !report.controllers.iter().all(|n| seen.insert(n.clone())) {
        return Err(Error::Contract("controller names must be unique".into()));
    }
    for c in controllers.iter_mut() {
        for s in scenarios {
            match simulate_episode(c.as_mut(), s, params, cfg) {
                Ok(e) => report.episodes.push(e),
                Err(e) => {
                    log::warn!("{} on scenario {}: {e}", c.name(), s.id);
                    report.failures.push(EpisodeFailure {
                        controller: c.name().to_string(),
                        scenario_id: s.id,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(report)
}

pub const REPORT_HEADER: [&str; 6] = ["controller", "scenario_id", "J_eco", "J_time", "n_soc_violations", "max_soc_excursion"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn report_csv(rows: &[EpisodeSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(|e| Error::Solver(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.controller.clone(),
            r.scenario_id.to_string(),
            fmt_f64(r.j_eco),
            fmt_f64(r.j_time),
            r.n_soc_violations.to_string(),
            fmt_f64(r.max_soc_excursion),
        ])
        .map_err(|e| Error::Solver(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Solver(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Solver(e.to_string()))
}

pub fn parse_report_csv(path: &Path, text: &str) -> Result<Vec<EpisodeSummary>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let hdr = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?;
    if hdr.iter().ne(REPORT_HEADER) {
        return Err(Error::parse(path, 1, "unexpected report header"));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::parse(path, k + 2, e.to_string())))
        .collect()
}

fn cell(q: &Option<Quartiles>, f: impl Fn(&Quartiles) -> String) -> String {
    q.as_ref().map_or_else(|| "n/a".into(), f)
}

pub fn report_markdown(report: &ComparisonReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("Ratios are per scenario against `{}`.\n\n", report.reference()));
    s.push_str("| controller | episodes | failed | median J_eco | J_eco IQR | median J_eco ratio | median J_time (s) | median J_time ratio | SoC violations | max SoC excursion (kWh) |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for c in report.summaries() {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.3} |\n",
            c.controller,
            c.episodes,
            c.failures,
            cell(&c.j_eco, |q| format!("{:.3}", q.median)),
            cell(&c.j_eco, |q| format!("{:.3} to {:.3}", q.q1, q.q3)),
            cell(&c.eco_ratio, |q| format!("{:.4}", q.median)),
            cell(&c.j_time, |q| format!("{:.6}", q.median)),
            cell(&c.time_ratio, |q| format!("{:.4}", q.median)),
            c.soc_violations,
            c.max_soc_excursion,
        ));
    }
    if !report.failures.is_empty() {
        s.push_str("\nFailed episodes:\n\n");
        for f in &report.failures {
            s.push_str(&format!("- {} on scenario {}: {}\n", f.controller, f.scenario_id, f.reason));
        }
    }
    s
}

/// Writes `path` in the requested format.
pub fn export_report(report: &ComparisonReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report_csv(&report.rows())?,
        ReportFormat::Markdown => report_markdown(report),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
