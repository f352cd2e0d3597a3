//! Disturbance realizations, bounded-noise forecasts and noisy price profiles.

use std::f64::consts::PI;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Disturbance, ExchangeParams, LoadResParams, PriceSample};

/// Initial SoC values of the default experiment (kWh).
pub const DEFAULT_SOC0: [f64; 4] = [44.0, 48.0, 52.0, 56.0];

const SCENARIO_HEADER: &str = "# microgrid-scenarios v1";
const SCENARIO_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Pv,
    Wind,
    Load,
    PriceBuy,
    PriceSell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub kind: ProfileKind,
    pub values: Vec<f64>,
}

fn hour(t: usize) -> f64 {
    (t % 24) as f64
}

pub fn pv_shape(t: usize) -> f64 {
    let s = (PI * (hour(t) - 6.0) / 12.0).sin().max(0.0);
    60.0 * s * s
}

pub fn wind_shape(t: usize) -> f64 {
    25.0 + 10.0 * (2.0 * PI * hour(t) / 24.0 + 1.0).sin()
}

pub fn load_shape(t: usize) -> f64 {
    let h = hour(t);
    80.0 + 30.0 * (2.0 * PI * (h - 8.0) / 24.0).sin() + 20.0 * (-((h - 19.0) / 2.0).powi(2)).exp()
}

/// Nominal PV, wind and load profiles of `len` hourly steps, clamped so that
/// PV + wind and load stay inside the plant bounds.
pub fn nominal_profiles(len: usize, bounds: &LoadResParams) -> (Profile, Profile, Profile) {
    let mut pv = Vec::with_capacity(len);
    let mut wind = Vec::with_capacity(len);
    let mut load = Vec::with_capacity(len);
    for t in 0..len {
        let (p, w) = clamp_res(pv_shape(t), wind_shape(t), bounds);
        pv.push(p);
        wind.push(w);
        load.push(load_shape(t).clamp(bounds.p_load_min, bounds.p_load_max));
    }
    (
        Profile { kind: ProfileKind::Pv, values: pv },
        Profile { kind: ProfileKind::Wind, values: wind },
        Profile { kind: ProfileKind::Load, values: load },
    )
}

/// Scales PV and wind by a common factor so their sum lands inside the RES bounds.
fn clamp_res(pv: f64, wind: f64, b: &LoadResParams) -> (f64, f64) {
    let sum = pv + wind;
    let target = sum.clamp(b.p_res_min, b.p_res_max);
    if sum == target {
        (pv, wind)
    } else if sum > 0.0 {
        let f = target / sum;
        (pv * f, wind * f)
    } else {
        (0.0, target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Profile length in steps; covers the simulated horizon plus one MPC window.
    pub steps: usize,
    /// Multiplicative realization noise half-widths.
    pub pv_band: f64,
    pub wind_band: f64,
    pub load_band: f64,
    /// Relative price fluctuation half-width.
    pub price_band: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            steps: 48,
            pv_band: 0.3,
            wind_band: 0.2,
            load_band: 0.2,
            price_band: 0.15,
        }
    }
}

/// One disturbance realization with its PV and wind parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub pv: Vec<f64>,
    pub wind: Vec<f64>,
    pub load: Vec<f64>,
}

impl Realization {
    pub fn res(&self) -> Vec<f64> {
        self.pv.iter().zip(&self.wind).map(|(a, b)| a + b).collect()
    }
}

pub fn sample_realization<R: Rng + ?Sized>(cfg: &ScenarioConfig, bounds: &LoadResParams, rng: &mut R) -> Realization {
    let mut band = |b: f64| 1.0 + if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
    let mut r = Realization {
        pv: Vec::with_capacity(cfg.steps),
        wind: Vec::with_capacity(cfg.steps),
        load: Vec::with_capacity(cfg.steps),
    };
    for t in 0..cfg.steps {
        let pv = pv_shape(t) * band(cfg.pv_band);
        let wind = wind_shape(t) * band(cfg.wind_band);
        let (pv, wind) = clamp_res(pv, wind, bounds);
        r.pv.push(pv);
        r.wind.push(wind);
        r.load.push((load_shape(t) * band(cfg.load_band)).clamp(bounds.p_load_min, bounds.p_load_max));
    }
    r
}

/// Buy and sell price profiles: nominal value times `1 + f(t)` with a bounded,
/// zero-mean fluctuation `|f| <= band` made of daily harmonics with random
/// phases plus a small independent part; `c_p(t) >= c_s(t)` holds pointwise.
pub fn price_profiles(nominal: &ExchangeParams, len: usize, band: f64, seed: u64) -> (Profile, Profile) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = |base: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let p1 = rng.random_range(0.0..2.0 * PI);
        let p2 = rng.random_range(0.0..2.0 * PI);
        (0..len)
            .map(|t| {
                let h = hour(t);
                let iid: f64 = rng.random_range(-1.0..=1.0);
                let f = 0.6 * (2.0 * PI * h / 24.0 + p1).sin() + 0.25 * (4.0 * PI * h / 24.0 + p2).sin() + 0.15 * iid;
                base * (1.0 + band * f)
            })
            .collect()
    };
    let buy = series(nominal.c_p, &mut rng);
    let sell: Vec<f64> = series(nominal.c_s, &mut rng)
        .into_iter()
        .zip(&buy)
        .map(|(s, &b)| s.min(b).max(0.0))
        .collect();
    (
        Profile { kind: ProfileKind::PriceBuy, values: buy },
        Profile { kind: ProfileKind::PriceSell, values: sell },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: usize,
    pub soc0: f64,
    pub true_res: Vec<f64>,
    pub true_load: Vec<f64>,
    pub c_p: Vec<f64>,
    pub c_s: Vec<f64>,
    pub forecast_seed: u64,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.true_res.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_res.is_empty()
    }

    pub fn disturbance(&self, t: usize) -> Disturbance {
        Disturbance {
            p_res: self.true_res[t],
            p_load: self.true_load[t],
        }
    }

    pub fn price(&self, t: usize) -> PriceSample {
        PriceSample {
            c_p: self.c_p[t],
            c_s: self.c_s[t],
        }
    }
}

/// `n_real` realizations crossed with every initial SoC; realization `r` with
/// SoC index `j` gets id `r * |soc0_set| + j`.
pub fn sample_scenarios(
    bounds: &LoadResParams,
    exchange: &ExchangeParams,
    n_real: usize,
    soc0_set: &[f64],
    seed: u64,
    cfg: &ScenarioConfig,
) -> Result<Vec<Scenario>> {
    if n_real == 0 || soc0_set.is_empty() {
        return Err(Error::Contract("need at least one realization and one initial SoC".into()));
    }
    let mut out = Vec::with_capacity(n_real * soc0_set.len());
    for r in 0..n_real {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let real = sample_realization(cfg, bounds, &mut rng);
        let price_seed: u64 = rng.random();
        let (buy, sell) = price_profiles(exchange, cfg.steps, cfg.price_band, price_seed);
        let res = real.res();
        for (j, &soc0) in soc0_set.iter().enumerate() {
            let id = r * soc0_set.len() + j;
            out.push(Scenario {
                id,
                soc0,
                true_res: res.clone(),
                true_load: real.load.clone(),
                c_p: buy.values.clone(),
                c_s: sell.values.clone(),
                forecast_seed: seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(id as u64 + 1)),
            });
        }
    }
    Ok(out)
}

/// Bounded-noise forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Relative half-width per lookahead step.
    pub rel_band: Vec<f64>,
    /// Absolute half-width added to every step (kW).
    pub abs_floor: f64,
}

impl ForecastConfig {
    pub fn default_for(horizon: usize) -> Self {
        const BAND: [f64; 6] = [0.03, 0.05, 0.08, 0.10, 0.12, 0.15];
        ForecastConfig {
            rel_band: (0..horizon).map(|k| BAND[k.min(BAND.len() - 1)]).collect(),
            abs_floor: 0.0,
        }
    }

    pub fn perfect(horizon: usize) -> Self {
        ForecastConfig {
            rel_band: vec![0.0; horizon],
            abs_floor: 0.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.rel_band.iter().any(|&b| !(b >= 0.0)) || !(self.abs_floor >= 0.0) {
            return Err(Error::Contract("forecast bands must be nonnegative".into()));
        }
        if self.rel_band.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Contract("forecast bands must not shrink with lookahead".into()));
        }
        Ok(())
    }
}

/// Forecast of `true(t .. t+depth)`, each value perturbed uniformly within its
/// band and clamped to the plant bounds. Deterministic in `(forecast_seed, t)`.
pub fn forecast(
    s: &Scenario,
    t: usize,
    depth: usize,
    cfg: &ForecastConfig,
    bounds: &LoadResParams,
) -> Result<Vec<Disturbance>> {
    if t + depth > s.len() {
        return Err(Error::Contract(format!(
            "forecast window {t}..{} exceeds scenario length {}",
            t + depth,
            s.len()
        )));
    }
    if cfg.rel_band.len() < depth {
        return Err(Error::Shape(format!("{} forecast bands for depth {depth}", cfg.rel_band.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.forecast_seed);
    rng.set_stream(t as u64);
    let mut noisy = |v: f64, rel: f64| {
        let half = rel * v.abs() + cfg.abs_floor;
        if half > 0.0 {
            v + rng.random_range(-half..=half)
        } else {
            v
        }
    };
    Ok((0..depth)
        .map(|k| {
            let w = s.disturbance(t + k);
            let rel = cfg.rel_band[k];
            Disturbance {
                p_res: noisy(w.p_res, rel).clamp(bounds.p_res_min, bounds.p_res_max),
                p_load: noisy(w.p_load, rel).clamp(bounds.p_load_min, bounds.p_load_max),
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: String,
    steps: usize,
    scenarios: Vec<SidecarEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarEntry {
    id: usize,
    soc0: f64,
    forecast_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    scenario_id: usize,
    t: usize,
    p_res_true: f64,
    p_load_true: f64,
    c_p: f64,
    c_s: f64,
}

/// Sidecar file next to a scenario CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<()> {
    let path = path.as_ref();
    let steps = scenarios.first().map_or(0, Scenario::len);
    if scenarios.iter().any(|s| s.len() != steps) {
        return Err(Error::Shape("scenarios of unequal length".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(SCENARIO_HEADER.as_bytes());
    buf.extend_from_slice(b"\n# units: t in steps of ts; p_res_true, p_load_true in kW; c_p, c_s in $/kWh\n");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for s in scenarios {
            for t in 0..steps {
                w.serialize(Row {
                    scenario_id: s.id,
                    t,
                    p_res_true: s.true_res[t],
                    p_load_true: s.true_load[t],
                    c_p: s.c_p[t],
                    c_s: s.c_s[t],
                })
                .map_err(|e| Error::Solver(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        format_version: SCENARIO_VERSION.into(),
        steps,
        scenarios: scenarios
            .iter()
            .map(|s| SidecarEntry { id: s.id, soc0: s.soc0, forecast_seed: s.forecast_seed })
            .collect(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&sp, e))
}

pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    let first = first.trim_end();
    if first != SCENARIO_HEADER {
        return match first.strip_prefix("# microgrid-scenarios ") {
            Some(v) => Err(Error::Version { expected: SCENARIO_VERSION.into(), found: v.into() }),
            None => Err(Error::parse(path, 1, "missing scenario file header")),
        };
    }
    let sp = sidecar_path(path);
    let side_text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::parse(&sp, e.line(), e.to_string()))?;
    if side.format_version != SCENARIO_VERSION {
        return Err(Error::Version { expected: SCENARIO_VERSION.into(), found: side.format_version });
    }

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let mut out: Vec<Scenario> = side
        .scenarios
        .iter()
        .map(|e| Scenario {
            id: e.id,
            soc0: e.soc0,
            true_res: Vec::with_capacity(side.steps),
            true_load: Vec::with_capacity(side.steps),
            c_p: Vec::with_capacity(side.steps),
            c_s: Vec::with_capacity(side.steps),
            forecast_seed: e.forecast_seed,
        })
        .collect();
    let mut last_line = 0;
    let mut next = (0usize, 0usize);
    for rec in rdr.deserialize::<Row>() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        last_line += 1;
        let (si, t) = next;
        let line = last_line + 3;
        if si >= out.len() || rec.scenario_id != out[si].id || rec.t != t {
            return Err(Error::parse(
                path,
                line,
                format!("expected scenario {} step {t}, found scenario {} step {}", out.get(si).map_or(usize::MAX, |s| s.id), rec.scenario_id, rec.t),
            ));
        }
        let s = &mut out[si];
        s.true_res.push(rec.p_res_true);
        s.true_load.push(rec.p_load_true);
        s.c_p.push(rec.c_p);
        s.c_s.push(rec.c_s);
        next = if t + 1 == side.steps { (si + 1, 0) } else { (si, t + 1) };
    }
    if next != (out.len(), 0) {
        return Err(Error::parse(
            path,
            last_line + 3,
            format!("file ends early: {} scenarios of {} steps expected", out.len(), side.steps),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MicrogridParams;

    fn params() -> MicrogridParams {
        MicrogridParams::reference()
    }

    #[test]
    fn nominal_shape_examples() {
        let b = params().load_res;
        let (pv, wind, load) = nominal_profiles(48, &b);
        assert_eq!(pv.values[0], 0.0);
        assert!((pv_shape(12) - 60.0).abs() < 1e-12);
        assert!((pv.values[12] - 60.0).abs() < 1e-12);
        for t in 0..48 {
            let res = pv.values[t] + wind.values[t];
            assert!((0.0..=120.0).contains(&res));
            assert!((20.0..=150.0).contains(&load.values[t]));
        }
        // evening peak above the morning trough
        assert!(load.values[19] > load.values[4]);
    }

    #[test]
    fn default_set_has_two_hundred_scenarios() {
        let p = params();
        let s = sample_scenarios(&p.load_res, &p.exchange, 50, &DEFAULT_SOC0, 1, &ScenarioConfig::default()).unwrap();
        assert_eq!(s.len(), 200);
        assert!(s.iter().all(|x| x.len() == 48));
        let b = &p.load_res;
        for x in &s {
            assert!(x.true_res.iter().all(|v| (b.p_res_min..=b.p_res_max).contains(v)));
            assert!(x.true_load.iter().all(|v| (b.p_load_min..=b.p_load_max).contains(v)));
            assert!(x.c_p.iter().zip(&x.c_s).all(|(a, b)| a >= b && *b >= 0.0));
        }
        // realizations shared across the SoC values, distinct across realizations
        assert_eq!(s[0].true_res, s[3].true_res);
        assert_ne!(s[0].true_res, s[4].true_res);
        assert_eq!(s[1].soc0, 48.0);
        assert!(sample_scenarios(&p.load_res, &p.exchange, 0, &DEFAULT_SOC0, 1, &ScenarioConfig::default()).is_err());
    }

    #[test]
    fn res_is_pv_plus_wind() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = sample_realization(&ScenarioConfig::default(), &p.load_res, &mut rng);
        for (t, v) in r.res().iter().enumerate() {
            assert_eq!(*v, r.pv[t] + r.wind[t]);
        }
    }

    #[test]
    fn price_profiles_are_bounded_and_centred() {
        let x = params().exchange;
        let (buy, sell) = price_profiles(&x, 48, 0.0, 5);
        assert!(buy.values.iter().all(|&v| v == x.c_p));
        assert!(sell.values.iter().all(|&v| v == x.c_s));
        for seed in 0..50 {
            let (buy, sell) = price_profiles(&x, 48, 0.15, seed);
            for day in buy.values.chunks(24).zip(sell.values.chunks(24)) {
                let mb = day.0.iter().sum::<f64>() / 24.0;
                let ms = day.1.iter().sum::<f64>() / 24.0;
                assert!((mb / x.c_p - 1.0).abs() <= 0.02, "seed {seed}: buy mean {mb}");
                assert!((ms / x.c_s - 1.0).abs() <= 0.02, "seed {seed}: sell mean {ms}");
            }
            assert!(buy.values.iter().all(|v| (v / x.c_p - 1.0).abs() <= 0.15 + 1e-12));
            assert!(buy.values.iter().zip(&sell.values).all(|(b, s)| b >= s));
        }
    }

    #[test]
    fn forecast_properties() {
        let p = params();
        let s = &sample_scenarios(&p.load_res, &p.exchange, 1, &[50.0], 9, &ScenarioConfig::default()).unwrap()[0];
        let exact = forecast(s, 5, 6, &ForecastConfig::perfect(6), &p.load_res).unwrap();
        for (k, w) in exact.iter().enumerate() {
            assert_eq!(*w, s.disturbance(5 + k));
        }
        let cfg = ForecastConfig::default_for(6);
        cfg.check().unwrap();
        let a = forecast(s, 5, 6, &cfg, &p.load_res).unwrap();
        let b = forecast(s, 5, 6, &cfg, &p.load_res).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, forecast(s, 6, 6, &cfg, &p.load_res).unwrap());
        for (k, w) in a.iter().enumerate() {
            let truth = s.disturbance(5 + k);
            assert!((w.p_res - truth.p_res).abs() <= cfg.rel_band[k] * truth.p_res + 1e-12);
            assert!((w.p_load - truth.p_load).abs() <= cfg.rel_band[k] * truth.p_load + 1e-12);
        }
        assert!(forecast(s, 43, 6, &cfg, &p.load_res).is_err());
        assert!(forecast(s, 42, 6, &cfg, &p.load_res).is_ok());
        let shrinking = ForecastConfig { rel_band: vec![0.1, 0.05], abs_floor: 0.0 };
        assert!(shrinking.check().is_err());
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let p = params();
        let s = sample_scenarios(&p.load_res, &p.exchange, 2, &[44.0, 56.0], 4, &ScenarioConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sc.csv");
        save_scenarios(&path, &s).unwrap();
        assert_eq!(load_scenarios(&path).unwrap(), s);

        let again = dir.path().join("sc2.csv");
        let s2 = sample_scenarios(&p.load_res, &p.exchange, 2, &[44.0, 56.0], 4, &ScenarioConfig::default()).unwrap();
        save_scenarios(&again, &s2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        fs::write(&path, lines[..lines.len() - 5].join("\n") + "\n").unwrap();
        assert!(matches!(load_scenarios(&path), Err(Error::Parse { .. })));

        fs::write(&path, text.replacen("v1", "v9", 1)).unwrap();
        assert!(matches!(load_scenarios(&path), Err(Error::Version { .. })));

        let mut bad = lines.clone();
        bad[10] = "0,7,abc,1,2,3";
        fs::write(&path, bad.join("\n") + "\n").unwrap();
        match load_scenarios(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 11),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
