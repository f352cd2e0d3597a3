//! Dense GELU network with hand-written backpropagation, Adam and JSON persistence.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: &str = "mlp-v1";

/// Upper bound on |gelu'(x)|; the supremum is attained at x = sqrt(2).
pub const GELU_SLOPE_MAX: f64 = 1.1290;

/// Standard normal CDF; the erfc form keeps the lower tail accurate.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

pub fn gelu_prime(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    norm_cdf(x) + x * pdf
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let s = MlpSpec { layer_sizes };
        s.check()?;
        Ok(s)
    }

    /// Three hidden layers of twelve units.
    pub fn with_io(n_in: usize, n_out: usize) -> Self {
        MlpSpec {
            layer_sizes: vec![n_in, 12, 12, 12, n_out],
        }
    }

    pub fn reference() -> Self {
        Self::with_io(33, 4)
    }

    pub fn check(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Shape(format!("bad layer sizes {:?}", self.layer_sizes)));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Affine layer; `w` is row-major with `rows` outputs and `cols` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.w.chunks_exact(self.cols).zip(&self.b).map(|(row, b)| {
            b + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        }));
    }
}

/// Network parameters; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        MlpParams {
            layers: spec.layer_sizes.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect(),
        }
    }

    /// Uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for l in &mut p.layers {
            let a = (6.0 / (l.rows + l.cols) as f64).sqrt();
            for w in &mut l.w {
                *w = rng.random_range(-a..=a);
            }
        }
        p
    }

    pub fn spec(&self) -> MlpSpec {
        let mut sizes = vec![self.layers[0].cols];
        sizes.extend(self.layers.iter().map(|l| l.rows));
        MlpSpec { layer_sizes: sizes }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.layers[0].cols {
            return Err(Error::Shape(format!("input length {} for {} network inputs", x.len(), self.layers[0].cols)));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = gelu(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Lipschitz constant bound in the Euclidean norm from layer Frobenius norms.
    pub fn lipschitz_bound(&self) -> f64 {
        let hidden = (self.layers.len() - 1) as i32;
        self.layers
            .iter()
            .map(|l| l.w.iter().map(|w| w * w).sum::<f64>().sqrt())
            .product::<f64>()
            * GELU_SLOPE_MAX.powi(hidden)
    }

    /// Adds the gradient of `||f(x) - y||^2` into `grad` and returns the loss term.
    fn accumulate(&self, x: &[f64], y: &[f64], grad: &mut MlpParams) -> f64 {
        let n = self.layers.len();
        // pre-activations z[i] and layer inputs a[i]
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n);
        acts.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            l.apply(&acts[i], &mut z);
            let a = if i + 1 < n { z.iter().map(|&v| gelu(v)).collect() } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        let out = &acts[n];
        let mut delta: Vec<f64> = out.iter().zip(y).map(|(o, t)| 2.0 * (o - t)).collect();
        let loss = out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            if i + 1 < n {
                for (d, &z) in delta.iter_mut().zip(&pre[i]) {
                    *d *= gelu_prime(z);
                }
            }
            let g = &mut grad.layers[i];
            let input = &acts[i];
            for (r, &d) in delta.iter().enumerate() {
                g.b[r] += d;
                for (gw, &a) in g.w[r * l.cols..(r + 1) * l.cols].iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if i > 0 {
                let mut back = vec![0.0; l.cols];
                for (r, &d) in delta.iter().enumerate() {
                    for (bk, &w) in back.iter_mut().zip(&l.w[r * l.cols..(r + 1) * l.cols]) {
                        *bk += d * w;
                    }
                }
                delta = back;
            }
        }
        loss
    }

    fn loss_and_grad_idx(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], idx: &[usize]) -> Result<(f64, MlpParams)> {
        let mut grad = MlpParams::zeros(&self.spec());
        let mut loss = 0.0;
        for &i in idx {
            let l = self.accumulate(&xs[i], &ys[i], &mut grad);
            if !l.is_finite() {
                return Err(Error::NonFinite { sample: i });
            }
            loss += l;
        }
        Ok((loss, grad))
    }

    fn loss_idx(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], idx: &[usize]) -> Result<f64> {
        let mut loss = 0.0;
        for &i in idx {
            let out = self.forward(&xs[i])?;
            let l: f64 = out.iter().zip(&ys[i]).map(|(o, t)| (o - t) * (o - t)).sum();
            if !l.is_finite() {
                return Err(Error::NonFinite { sample: i });
            }
            loss += l;
        }
        Ok(loss)
    }
}

/// Sum over the batch of `||f(x_k) - y_k||^2` and its gradient.
pub fn loss_and_grad(p: &MlpParams, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(f64, MlpParams)> {
    check_batch(p, xs, ys)?;
    let idx: Vec<usize> = (0..xs.len()).collect();
    p.loss_and_grad_idx(xs, ys, &idx)
}

fn check_batch(p: &MlpParams, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} inputs and {} targets", xs.len(), ys.len())));
    }
    let spec = p.spec();
    for (k, (x, y)) in xs.iter().zip(ys).enumerate() {
        if x.len() != spec.n_inputs() || y.len() != spec.n_outputs() {
            return Err(Error::Shape(format!("sample {k}: lengths {}/{} for spec {:?}", x.len(), y.len(), spec.layer_sizes)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n: usize) -> Self {
        Normalizer {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Column mean and population std, std floored at `eps_std`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]> + Clone, eps_std: f64) -> Result<Self> {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        for r in rows.clone() {
            if count == 0 {
                mean = vec![0.0; r.len()];
            } else if r.len() != mean.len() {
                return Err(Error::Shape("ragged rows".into()));
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("cannot fit a normalizer on no rows".into()));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; mean.len()];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / count as f64).sqrt().max(eps_std)).collect();
        Ok(Normalizer { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub eps_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 2000,
            patience: 100,
            val_fraction: 0.1,
            eps_std: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0
            && self.val_fraction > 0.0
            && self.val_fraction < 1.0
            && self.eps_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One bias-corrected step; `grad` is scaled by `scale` first.
    pub fn update(&mut self, p: &mut MlpParams, grad: &MlpParams, scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((w, g), m), v) in p.values_mut().zip(grad.values()).zip(&mut self.m).zip(&mut self.v) {
            let g = g * scale;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample loss in normalized output units.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub n_train: usize,
    pub n_val: usize,
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn final_epoch(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// A trained network with its input and output standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    /// Free-form configuration the model was trained under.
    pub meta: serde_json::Value,
}

impl Model {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.n_inputs() {
            return Err(Error::Shape(format!("{} features for a {}-input model", x.len(), self.spec.n_inputs())));
        }
        let z = self.params.forward(&self.input_norm.apply(x))?;
        Ok(self.output_norm.invert(&z))
    }

    pub fn config_digest(&self) -> String {
        config_digest(&self.spec, &self.meta)
    }
}

pub fn config_digest(spec: &MlpSpec, meta: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(spec).unwrap_or_default().as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_string(meta).unwrap_or_default().as_bytes());
    hex::encode(h.finalize())
}

/// Train on raw `(x, y)` pairs: standardize both sides on the training split,
/// minimize the summed squared error by Adam over shuffled mini-batches and
/// keep the parameters with the lowest validation loss.
pub fn fit(spec: &MlpSpec, xs: &[Vec<f64>], ys: &[Vec<f64>], cfg: &TrainConfig, meta: serde_json::Value) -> Result<(Model, TrainLog)> {
    spec.check()?;
    cfg.check()?;
    let probe = MlpParams::zeros(spec);
    check_batch(&probe, xs, ys)?;
    let n = xs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = if n < 2 { 0 } else { ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1) };
    let (val_idx, train_src) = order.split_at(n_val);
    let mut train_idx = train_src.to_vec();

    let input_norm = Normalizer::fit(train_idx.iter().map(|&i| xs[i].as_slice()), cfg.eps_std)?;
    let output_norm = Normalizer::fit(train_idx.iter().map(|&i| ys[i].as_slice()), cfg.eps_std)?;
    let nx: Vec<Vec<f64>> = xs.iter().map(|x| input_norm.apply(x)).collect();
    let ny: Vec<Vec<f64>> = ys.iter().map(|y| output_norm.apply(y)).collect();
    let val_or_train: Vec<usize> = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };

    let mut params = MlpParams::glorot(spec, &mut rng);
    let mut adam = AdamState::new(params.n_params(), cfg);
    let initial_train_loss = params.loss_idx(&nx, &ny, &train_idx)? / train_idx.len() as f64;
    let mut best = params.clone();
    let mut best_val = params.loss_idx(&nx, &ny, &val_or_train)? / val_or_train.len() as f64;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            let (_, grad) = params.loss_and_grad_idx(&nx, &ny, batch)?;
            adam.update(&mut params, &grad, 1.0 / batch.len() as f64);
        }
        if !params.is_finite() {
            return Err(Error::Solver(format!("training diverged in epoch {epoch}")));
        }
        let train_loss = params.loss_idx(&nx, &ny, &train_idx)? / train_idx.len() as f64;
        let val_loss = params.loss_idx(&nx, &ny, &val_or_train)? / val_or_train.len() as f64;
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        epochs.push(EpochLog { epoch, train_loss, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let log = TrainLog {
        n_train: train_idx.len(),
        n_val,
        initial_train_loss,
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    };
    let model = Model {
        spec: spec.clone(),
        params: best,
        input_norm,
        output_norm,
        meta,
    };
    Ok((model, log))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: String,
    spec: MlpSpec,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    normalizer: NormalizerFile,
    meta: serde_json::Value,
    config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct NormalizerFile {
    input: Normalizer,
    output: Normalizer,
}

pub fn model_to_json(m: &Model) -> Result<String> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION.into(),
        spec: m.spec.clone(),
        weights: m.params.layers.iter().map(|l| l.w.clone()).collect(),
        biases: m.params.layers.iter().map(|l| l.b.clone()).collect(),
        normalizer: NormalizerFile {
            input: m.input_norm.clone(),
            output: m.output_norm.clone(),
        },
        meta: m.meta.clone(),
        config_digest: m.config_digest(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn model_from_json(text: &str) -> Result<Model> {
    let f: ModelFile = serde_json::from_str(text)?;
    if f.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            expected: MODEL_FORMAT_VERSION.into(),
            found: f.format_version,
        });
    }
    f.spec.check()?;
    let expected = config_digest(&f.spec, &f.meta);
    if expected != f.config_digest {
        return Err(Error::Digest {
            expected,
            found: f.config_digest,
        });
    }
    let n_layers = f.spec.layer_sizes.len() - 1;
    if f.weights.len() != n_layers || f.biases.len() != n_layers {
        return Err(Error::Shape(format!("{} weight / {} bias arrays for {n_layers} layers", f.weights.len(), f.biases.len())));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (i, (w, b)) in f.weights.into_iter().zip(f.biases).enumerate() {
        let (cols, rows) = (f.spec.layer_sizes[i], f.spec.layer_sizes[i + 1]);
        if w.len() != rows * cols || b.len() != rows {
            return Err(Error::Shape(format!("layer {i}: {} weights / {} biases, expected {} / {rows}", w.len(), b.len(), rows * cols)));
        }
        layers.push(Layer { rows, cols, w, b });
    }
    let params = MlpParams { layers };
    if !params.is_finite() {
        return Err(Error::Shape("non-finite parameters".into()));
    }
    let (inp, out) = (f.normalizer.input, f.normalizer.output);
    if inp.mean.len() != f.spec.n_inputs() || inp.std.len() != f.spec.n_inputs() || out.mean.len() != f.spec.n_outputs() || out.std.len() != f.spec.n_outputs() {
        return Err(Error::Shape("normalizer length does not match the network".into()));
    }
    if inp.std.iter().chain(&out.std).any(|&s| !(s > 0.0)) {
        return Err(Error::Shape("normalizer std must be positive".into()));
    }
    Ok(Model {
        spec: f.spec,
        params,
        input_norm: inp,
        output_norm: out,
        meta: f.meta,
    })
}

pub fn save_model(path: impl AsRef<Path>, m: &Model) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    model_from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
