//! Feature augmentation, noisy-expert data collection and the deployed learned policy.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::empc::{expert_action, EmpcConfig, InfoTuple, SolveStats};
use crate::error::{Error, Result};
use crate::grid::{augmented_step, clip_to_box, input_box, BoxMode, ControlInput, Disturbance, GridState, MicrogridParams};
use crate::neural::{self, MlpSpec, Model, TrainConfig, TrainLog};
use crate::scenario::{forecast, ForecastConfig, Scenario};

pub const DATASET_FORMAT_VERSION: &str = "dataset-v1";

/// Tolerance for label membership in the input box.
pub const BOX_TOL: f64 = 1e-9;

/// Net injection seen by the ESS when a fraction `beta` of the load is shed.
pub fn virtual_disturbance(res_hat: f64, load_hat: f64, beta: f64) -> f64 {
    res_hat - (1.0 - beta) * load_hat
}

pub fn beta_grid(beta_max: f64, n_beta: usize) -> Result<Vec<f64>> {
    if n_beta < 2 {
        return Err(Error::Contract(format!("beta grid needs at least 2 points, got {n_beta}")));
    }
    Ok((0..n_beta).map(|i| i as f64 * beta_max / (n_beta - 1) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_beta: usize,
    pub t_w: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { n_beta: 3, t_w: 6 }
    }
}

impl FeatureConfig {
    /// Plain information tuple without the virtual-disturbance block.
    pub fn plain() -> Self {
        FeatureConfig { n_beta: 3, t_w: 0 }
    }

    pub fn check(&self, horizon: usize) -> Result<()> {
        if self.n_beta < 2 {
            return Err(Error::Contract(format!("n_beta = {} < 2", self.n_beta)));
        }
        if self.t_w > horizon {
            return Err(Error::Contract(format!("t_w = {} exceeds horizon {horizon}", self.t_w)));
        }
        Ok(())
    }

    pub fn dim(&self, n_gen: usize, horizon: usize) -> usize {
        1 + n_gen + 2 * horizon + self.n_beta * self.t_w
    }
}

/// Flattened augmented information tuple: SoC, previous generator powers,
/// RES forecasts, load forecasts, then `w_beta(tau, beta_i)` with the
/// lookahead as outer and the beta grid as inner index.
pub fn build_features(params: &MicrogridParams, info: &InfoTuple, fcfg: &FeatureConfig) -> Result<Vec<f64>> {
    let horizon = info.horizon();
    fcfg.check(horizon)?;
    if info.prev_gen_power.len() != params.n_gen() {
        return Err(Error::Shape(format!("{} previous powers for {} generators", info.prev_gen_power.len(), params.n_gen())));
    }
    let grid = beta_grid(params.load_res.beta_max, fcfg.n_beta)?;
    let mut f = Vec::with_capacity(fcfg.dim(params.n_gen(), horizon));
    f.push(info.soc0);
    f.extend(&info.prev_gen_power);
    f.extend(info.forecasts.iter().map(|w| w.p_res));
    f.extend(info.forecasts.iter().map(|w| w.p_load));
    for w in &info.forecasts[..fcfg.t_w] {
        f.extend(grid.iter().map(|&b| virtual_disturbance(w.p_res, w.p_load, b)));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite feature".into()));
    }
    Ok(f)
}

/// Column names matching `build_features`.
pub fn feature_names(n_gen: usize, horizon: usize, fcfg: &FeatureConfig) -> Vec<String> {
    let mut n = vec!["soc".to_string()];
    n.extend((0..n_gen).map(|i| format!("p_fg_prev[{i}]")));
    n.extend((0..horizon).map(|k| format!("p_res_hat[t+{k}]")));
    n.extend((0..horizon).map(|k| format!("p_load_hat[t+{k}]")));
    for k in 0..fcfg.t_w {
        n.extend((0..fcfg.n_beta).map(|i| format!("w_beta[t+{k}][{i}]")));
    }
    n
}

pub fn input_names(n_gen: usize) -> Vec<String> {
    let mut n: Vec<String> = (0..n_gen).map(|i| format!("p_fg[{i}]")).collect();
    n.push("p_exg".into());
    n.push("beta".into());
    n
}

/// Diagonal Gaussian perturbation of the expert input, one sigma per input coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: Vec<f64>,
    pub seed: u64,
}

impl NoiseConfig {
    /// Five percent of each coordinate's full range.
    pub fn default_for(params: &MicrogridParams, seed: u64) -> Self {
        let mut sigma: Vec<f64> = params.generators.iter().map(|g| 0.05 * g.p_max).collect();
        sigma.push(0.05 * 2.0 * params.exchange.p_max);
        sigma.push(0.05 * params.load_res.beta_max);
        NoiseConfig { sigma, seed }
    }

    pub fn zero(n_inputs: usize, seed: u64) -> Self {
        NoiseConfig {
            sigma: vec![0.0; n_inputs],
            seed,
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.sigma.iter_mut().for_each(|v| *v *= s);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    pub fn check(&self, n_inputs: usize) -> Result<()> {
        if self.sigma.len() != n_inputs {
            return Err(Error::Shape(format!("{} noise entries for {n_inputs} inputs", self.sigma.len())));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::Contract("noise sigma must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Perturbation for step `t` of scenario `scenario_id`.
    pub fn draw(&self, scenario_id: usize, t: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((scenario_id as u64) << 32) | t as u64);
        self.sigma
            .iter()
            .map(|s| {
                let e: f64 = StandardNormal.sample(&mut rng);
                s * e
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct NoisyAction {
    /// Input actually applied (perturbed and projected onto the input box).
    pub applied: ControlInput,
    pub expert: ControlInput,
    pub stats: SolveStats,
}

pub fn noisy_expert_action(
    params: &MicrogridParams,
    info: &InfoTuple,
    cfg: &EmpcConfig,
    noise: &NoiseConfig,
    scenario_id: usize,
    t: usize,
) -> Result<NoisyAction> {
    noise.check(params.n_gen() + 2)?;
    let (expert, stats) = expert_action(params, info, cfg)?;
    let applied = if noise.is_zero() {
        expert.clone()
    } else {
        let eps = noise.draw(scenario_id, t);
        let raw: Vec<f64> = expert.to_vec().iter().zip(&eps).map(|(u, e)| u + e).collect();
        let bx = input_box(params, &info.state(), cfg.box_mode)?;
        clip_to_box(&ControlInput::from_slice(&raw)?, &bx)
    };
    Ok(NoisyAction { applied, expert, stats })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub scenario_id: usize,
    pub t: usize,
    pub features: Vec<f64>,
    /// Applied input, the training target.
    pub label: Vec<f64>,
    /// Unperturbed expert input.
    pub expert: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedScenario {
    pub scenario_id: usize,
    pub t: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_config: FeatureConfig,
    pub n_gen: usize,
    pub horizon: usize,
    pub rows: Vec<DatasetRow>,
    pub failed: Vec<FailedScenario>,
    /// Labels that were found outside their step's input box.
    pub labels_outside_box: usize,
    /// Steps whose successor SoC left its bounds.
    pub soc_excursions: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_config.dim(self.n_gen, self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub t_sim: usize,
    pub forecast: ForecastConfig,
    pub jobs: usize,
}

impl CollectConfig {
    pub fn new(horizon: usize) -> Self {
        CollectConfig {
            t_sim: 24,
            forecast: ForecastConfig::default_for(horizon),
            jobs: 1,
        }
    }
}

struct Rollout {
    rows: Vec<DatasetRow>,
    outside: usize,
    excursions: usize,
}

fn rollout(
    params: &MicrogridParams,
    s: &Scenario,
    cfg: &EmpcConfig,
    fcfg: &FeatureConfig,
    noise: &NoiseConfig,
    ccfg: &CollectConfig,
) -> std::result::Result<Rollout, FailedScenario> {
    let fail = |t: usize, e: Error| FailedScenario {
        scenario_id: s.id,
        t,
        reason: e.to_string(),
    };
    let mut state = GridState::initial(s.soc0, params.n_gen());
    let mut out = Rollout {
        rows: Vec::with_capacity(ccfg.t_sim),
        outside: 0,
        excursions: 0,
    };
    for t in 0..ccfg.t_sim {
        let step = || -> Result<(DatasetRow, GridState, bool, bool)> {
            let w_hat = forecast(s, t, cfg.horizon, &ccfg.forecast, &params.load_res)?;
            let info = InfoTuple::new(&state, w_hat);
            let act = noisy_expert_action(params, &info, cfg, noise, s.id, t)?;
            let bx = input_box(params, &state, cfg.box_mode)?;
            let inside = bx.contains(&act.applied, BOX_TOL);
            let features = build_features(params, &info, fcfg)?;
            let o = augmented_step(params, &state, &act.applied, s.disturbance(t))?;
            let row = DatasetRow {
                scenario_id: s.id,
                t,
                features,
                label: act.applied.to_vec(),
                expert: act.expert.to_vec(),
            };
            Ok((row, o.next, inside, o.soc_excursion > 0.0))
        };
        let (row, next, inside, excursion) = step().map_err(|e| fail(t, e))?;
        out.rows.push(row);
        out.outside += usize::from(!inside);
        out.excursions += usize::from(excursion);
        state = next;
    }
    Ok(out)
}

/// Closed-loop rollouts of the noisy expert, `t_sim` rows per scenario in
/// `(scenario, t)` order. Scenarios with an infeasible step are dropped and
/// listed in `failed`.
pub fn collect_dataset(
    params: &MicrogridParams,
    scenarios: &[Scenario],
    cfg: &EmpcConfig,
    fcfg: &FeatureConfig,
    noise: &NoiseConfig,
    ccfg: &CollectConfig,
) -> Result<Dataset> {
    params.ensure_valid()?;
    cfg.check()?;
    fcfg.check(cfg.horizon)?;
    noise.check(params.n_gen() + 2)?;
    ccfg.forecast.check()?;
    if let Some(s) = scenarios.iter().find(|s| s.len() < ccfg.t_sim + cfg.horizon) {
        return Err(Error::Contract(format!(
            "scenario {} has {} steps, need {}",
            s.id,
            s.len(),
            ccfg.t_sim + cfg.horizon
        )));
    }
    let run = |s: &Scenario| rollout(params, s, cfg, fcfg, noise, ccfg);
    let results = par_map(scenarios, ccfg.jobs, run);

    let mut ds = Dataset {
        feature_config: *fcfg,
        n_gen: params.n_gen(),
        horizon: cfg.horizon,
        rows: Vec::with_capacity(scenarios.len() * ccfg.t_sim),
        failed: Vec::new(),
        labels_outside_box: 0,
        soc_excursions: 0,
    };
    for r in results {
        match r {
            Ok(ro) => {
                ds.rows.extend(ro.rows);
                ds.labels_outside_box += ro.outside;
                ds.soc_excursions += ro.excursions;
            }
            Err(f) => {
                log::warn!("scenario {} failed at step {}: {}", f.scenario_id, f.t, f.reason);
                ds.failed.push(f);
            }
        }
    }
    Ok(ds)
}

/// Order-preserving map over `items` on up to `jobs` scoped threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|sc| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| sc.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetSidecar {
    format_version: String,
    feature_config: FeatureConfig,
    n_gen: usize,
    horizon: usize,
    n_rows: usize,
    features: Vec<String>,
    inputs: Vec<String>,
    failed: Vec<FailedScenario>,
    labels_outside_box: usize,
    soc_excursions: usize,
}

pub fn dataset_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let d = ds.n_features();
    let m = ds.n_gen + 2;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["scenario_id".to_string(), "t".to_string()];
    header.extend((0..d).map(|i| format!("f_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.extend((0..m).map(|i| format!("ustar_{i}")));
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for r in &ds.rows {
        if r.features.len() != d || r.label.len() != m || r.expert.len() != m {
            return Err(Error::Shape(format!("row ({}, {}) has the wrong width", r.scenario_id, r.t)));
        }
        let mut rec = vec![r.scenario_id.to_string(), r.t.to_string()];
        rec.extend(r.features.iter().chain(&r.label).chain(&r.expert).map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = DatasetSidecar {
        format_version: DATASET_FORMAT_VERSION.into(),
        feature_config: ds.feature_config,
        n_gen: ds.n_gen,
        horizon: ds.horizon,
        n_rows: ds.rows.len(),
        features: feature_names(ds.n_gen, ds.horizon, &ds.feature_config),
        inputs: input_names(ds.n_gen),
        failed: ds.failed.clone(),
        labels_outside_box: ds.labels_outside_box,
        soc_excursions: ds.soc_excursions,
    };
    let sp = dataset_sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&sp, e))
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let sp = dataset_sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: DatasetSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&sp, e.line(), e.to_string()))?;
    if side.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            expected: DATASET_FORMAT_VERSION.into(),
            found: side.format_version,
        });
    }
    let d = side.feature_config.dim(side.n_gen, side.horizon);
    let m = side.n_gen + 2;
    let width = 2 + d + 2 * m;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let hdr = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?;
    if hdr.len() != width {
        return Err(Error::parse(path, 1, format!("{} columns, expected {width}", hdr.len())));
    }
    let mut rows = Vec::with_capacity(side.n_rows);
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if rec.len() != width {
            return Err(Error::parse(path, line, format!("{} fields, expected {width}", rec.len())));
        }
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| Error::parse(path, line, format!("column {i}: {e}")));
        let mut vals = Vec::with_capacity(width - 2);
        for i in 2..width {
            vals.push(rec[i].parse::<f64>().map_err(|e| Error::parse(path, line, format!("column {i}: {e}")))?);
        }
        rows.push(DatasetRow {
            scenario_id: int(0)?,
            t: int(1)?,
            features: vals[..d].to_vec(),
            label: vals[d..d + m].to_vec(),
            expert: vals[d + m..].to_vec(),
        });
    }
    if rows.len() != side.n_rows {
        return Err(Error::parse(path, rows.len() + 1, format!("{} rows, sidecar records {}", rows.len(), side.n_rows)));
    }
    Ok(Dataset {
        feature_config: side.feature_config,
        n_gen: side.n_gen,
        horizon: side.horizon,
        rows,
        failed: side.failed,
        labels_outside_box: side.labels_outside_box,
        soc_excursions: side.soc_excursions,
    })
}

/// What a trained network needs to be deployed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub feature_config: FeatureConfig,
    pub n_gen: usize,
    pub horizon: usize,
    pub box_mode: BoxMode,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub model: Model,
    pub meta: PolicyMeta,
}

impl LearnedPolicy {
    pub fn from_model(model: Model) -> Result<Self> {
        let meta: PolicyMeta = serde_json::from_value(model.meta.clone())
            .map_err(|e| Error::Contract(format!("model is not a policy bundle: {e}")))?;
        let want = (meta.feature_config.dim(meta.n_gen, meta.horizon), meta.n_gen + 2);
        if (model.spec.n_inputs(), model.spec.n_outputs()) != want {
            return Err(Error::Shape(format!(
                "network is {}->{}, policy needs {}->{}",
                model.spec.n_inputs(),
                model.spec.n_outputs(),
                want.0,
                want.1
            )));
        }
        Ok(LearnedPolicy { model, meta })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_model(neural::load_model(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        neural::save_model(path, &self.model)
    }

    /// Network output clipped onto the input box; no optimization involved.
    pub fn act(&self, params: &MicrogridParams, state: &GridState, forecasts: &[Disturbance]) -> Result<ControlInput> {
        if params.n_gen() != self.meta.n_gen {
            return Err(Error::Contract(format!("policy trained for {} generators, plant has {}", self.meta.n_gen, params.n_gen())));
        }
        if forecasts.len() != self.meta.horizon {
            return Err(Error::Contract(format!("policy expects {} forecast steps, got {}", self.meta.horizon, forecasts.len())));
        }
        let info = InfoTuple::new(state, forecasts.to_vec());
        let f = build_features(params, &info, &self.meta.feature_config)?;
        let raw = self.model.predict(&f)?;
        let bx = input_box(params, state, self.meta.box_mode)?;
        Ok(clip_to_box(&ControlInput::from_slice(&raw)?, &bx))
    }
}

pub fn learned_action(policy: &LearnedPolicy, params: &MicrogridParams, state: &GridState, forecasts: &[Disturbance]) -> Result<ControlInput> {
    policy.act(params, state, forecasts)
}

/// Fit the reference architecture to `(features, applied input)` pairs.
pub fn train_policy(ds: &Dataset, box_mode: BoxMode, tcfg: &TrainConfig) -> Result<(LearnedPolicy, TrainLog)> {
    if ds.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let spec = MlpSpec::with_io(ds.n_features(), ds.n_gen + 2);
    let meta = PolicyMeta {
        feature_config: ds.feature_config,
        n_gen: ds.n_gen,
        horizon: ds.horizon,
        box_mode,
        train: tcfg.clone(),
    };
    let xs: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.features.clone()).collect();
    let ys: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.label.clone()).collect();
    let (model, log) = neural::fit(&spec, &xs, &ys, tcfg, serde_json::to_value(&meta)?)?;
    Ok((LearnedPolicy::from_model(model)?, log))
}
