//! Built-in task runner: a three-layer MLP classifier trained from scratch
//! on a deterministic Gaussian-blobs dataset.
//!
//! The network is `input -> 64 (ReLU) -> 64 (ReLU) -> classes (softmax)`
//! with tensors `w0,b0,w1,b1,w2,b2`; weight matrices have shape
//! `[fan_in, fan_out]`. Training runs in `f32` with the loss summed in
//! `f64`. The forward and backward passes are generic so the gradient
//! check can rerun them in `f64`.

use std::collections::BTreeMap;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::collaborator::{TaskError, TaskRunner, TrainOutput, ValidateOutput};
use crate::plan::{FlPlan, HyperValue, Hyperparams};
use crate::tensorstore::ModelTensor;

pub const HIDDEN: usize = 64;
pub const TENSOR_NAMES: [&str; 6] = ["w0", "b0", "w1", "b1", "w2", "b2"];

/// Little-endian bit patterns of the four sentinel feature columns.
pub const SENTINEL_BITS: [u32; 4] = [0x3F1A_2B3C, 0xBF4D_5E6F, 0x3E7A_8B9C, 0xBEAD_BEEF];

/// The 16 bytes every sentinel-carrying sample contains, in memory order.
pub fn sentinel_bytes() -> [u8; 16] {
    let mut out = [0u8; 16];
    for (i, bits) in SENTINEL_BITS.iter().enumerate() {
        out[i * 4..i * 4 + 4].copy_from_slice(&bits.to_le_bytes());
    }
    out
}

fn hyper_u64(h: &Hyperparams, key: &str, default: u64) -> Result<u64, TaskError> {
    match h.get(key) {
        None => Ok(default),
        Some(v) => v.as_u64().ok_or_else(|| TaskError::BadHyperparam {
            key: key.into(),
            message: format!("expected a non-negative integer, got {v}"),
        }),
    }
}

fn hyper_positive(h: &Hyperparams, key: &str, default: u64) -> Result<usize, TaskError> {
    let v = hyper_u64(h, key, default)?;
    if v == 0 {
        return Err(TaskError::BadHyperparam {
            key: key.into(),
            message: "must be positive".into(),
        });
    }
    usize::try_from(v).map_err(|_| TaskError::BadHyperparam {
        key: key.into(),
        message: "too large".into(),
    })
}

fn hyper_f64(h: &Hyperparams, key: &str, default: f64) -> Result<f64, TaskError> {
    match h.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| TaskError::BadHyperparam {
                key: key.into(),
                message: format!("expected a number, got {v}"),
            }),
    }
}

fn hyper_str<'a>(h: &'a Hyperparams, key: &str, default: &'a str) -> Result<&'a str, TaskError> {
    match h.get(key) {
        None => Ok(default),
        Some(v) => v.as_str().ok_or_else(|| TaskError::BadHyperparam {
            key: key.into(),
            message: format!("expected a string, got {v}"),
        }),
    }
}

/// Dataset and architecture settings, read from the TRAIN task's
/// hyperparameters so every participant derives the same data and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub held_out_per_class: usize,
    pub feature_dim: usize,
    pub data_seed: u64,
    /// Standard deviation of the class centres around the origin.
    pub center_spread: f64,
    pub model_seed: u64,
    /// Appends the four sentinel columns to every sample.
    pub sentinel: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 4,
            samples_per_class: 400,
            held_out_per_class: 100,
            feature_dim: 8,
            data_seed: 7,
            center_spread: 0.9,
            model_seed: 0,
            sentinel: false,
        }
    }
}

impl DatasetConfig {
    pub fn from_hyperparams(h: &Hyperparams) -> Result<Self, TaskError> {
        let d = DatasetConfig::default();
        let sentinel = match h.get("sentinel") {
            None => false,
            Some(v) => v.as_bool().ok_or_else(|| TaskError::BadHyperparam {
                key: "sentinel".into(),
                message: "expected a boolean".into(),
            })?,
        };
        let cfg = DatasetConfig {
            classes: hyper_positive(h, "classes", d.classes as u64)?,
            samples_per_class: hyper_positive(h, "samples_per_class", d.samples_per_class as u64)?,
            held_out_per_class: hyper_u64(h, "held_out_per_class", d.held_out_per_class as u64)?
                as usize,
            feature_dim: hyper_positive(h, "feature_dim", d.feature_dim as u64)?,
            data_seed: hyper_u64(h, "data_seed", d.data_seed)?,
            center_spread: hyper_f64(h, "center_spread", d.center_spread)?,
            model_seed: hyper_u64(h, "model_seed", d.model_seed)?,
            sentinel,
        };
        if cfg.classes < 2 {
            return Err(TaskError::BadHyperparam {
                key: "classes".into(),
                message: "need at least two classes".into(),
            });
        }
        Ok(cfg)
    }

    /// The dataset section of the first TRAIN task, else defaults.
    pub fn from_plan(plan: &FlPlan) -> Result<Self, TaskError> {
        match plan.first_train_task() {
            Some(task) => Self::from_hyperparams(&task.hyperparams),
            None => Ok(Self::default()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + if self.sentinel { SENTINEL_BITS.len() } else { 0 }
    }
}

/// Row-major feature matrix plus class labels. Samples are interleaved by
/// class: sample `n` is the `n / classes`-th draw of class `n % classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub classes: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl SyntheticDataset {
    /// Generates `(training, held_out)` sets from the seed.
    pub fn generate(cfg: &DatasetConfig) -> (SyntheticDataset, SyntheticDataset) {
        let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.data_seed);
        let centers: Vec<f64> = (0..cfg.classes * cfg.feature_dim)
            .map(|_| cfg.center_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let train = Self::draw(cfg, &centers, cfg.samples_per_class, &mut rng);
        let held_out = Self::draw(cfg, &centers, cfg.held_out_per_class, &mut rng);
        (train, held_out)
    }

    fn draw(
        cfg: &DatasetConfig,
        centers: &[f64],
        per_class: usize,
        rng: &mut Xoshiro256StarStar,
    ) -> SyntheticDataset {
        let dim = cfg.input_dim();
        let n = per_class * cfg.classes;
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..per_class {
            for c in 0..cfg.classes {
                let center = &centers[c * cfg.feature_dim..(c + 1) * cfg.feature_dim];
                for &mu in center {
                    let z: f64 = StandardNormal.sample(rng);
                    features.push((mu + z) as f32);
                }
                if cfg.sentinel {
                    features.extend(SENTINEL_BITS.iter().map(|&b| f32::from_bits(b)));
                }
                labels.push(c as u32);
            }
        }
        SyntheticDataset {
            classes: cfg.classes,
            dim,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.features[n * self.dim..(n + 1) * self.dim]
    }

    /// Shard `index` (1-based) of `count`: the samples whose within-class
    /// draw number is congruent to `index - 1` modulo `count`. Every shard
    /// keeps the same class mix as the full set.
    pub fn shard(&self, index: usize, count: usize) -> SyntheticDataset {
        assert!(count >= 1 && (1..=count).contains(&index), "shard {index} of {count}");
        let mut out = SyntheticDataset {
            classes: self.classes,
            dim: self.dim,
            features: Vec::new(),
            labels: Vec::new(),
        };
        for n in (0..self.len()).filter(|n| (n / self.classes) % count == index - 1) {
            out.features.extend_from_slice(self.row(n));
            out.labels.push(self.labels[n]);
        }
        out
    }

    pub fn one_hot(&self, n: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.classes];
        v[self.labels[n] as usize] = 1.0;
        v
    }

    pub fn select(&self, indices: &[usize]) -> SyntheticDataset {
        let mut out = SyntheticDataset {
            classes: self.classes,
            dim: self.dim,
            features: Vec::with_capacity(indices.len() * self.dim),
            labels: Vec::with_capacity(indices.len()),
        };
        for &n in indices {
            out.features.extend_from_slice(self.row(n));
            out.labels.push(self.labels[n]);
        }
        out
    }
}

pub fn model_specs(input_dim: usize, classes: usize) -> Vec<(String, Vec<u32>)> {
    let dims = [input_dim, HIDDEN, HIDDEN, classes];
    (0..3)
        .flat_map(|l| {
            [
                (format!("w{l}"), vec![dims[l] as u32, dims[l + 1] as u32]),
                (format!("b{l}"), vec![dims[l + 1] as u32]),
            ]
        })
        .collect()
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(input_dim: usize, classes: usize, seed: u64) -> Vec<ModelTensor> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    model_specs(input_dim, classes)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().map(|&d| d as usize).product();
            let data = if shape.len() == 2 {
                let limit = (6.0 / f64::from(shape[0] + shape[1])).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..=limit) as f32).collect()
            } else {
                vec![0.0; n]
            };
            ModelTensor::new(name, shape, data)
        })
        .collect()
}

/// Parameters in a flat working layout: `[w0, b0, w1, b1, w2, b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub dims: [usize; 4],
    pub tensors: [Vec<F>; 6],
}

impl<F: Float> Params<F> {
    fn zeros_like(dims: [usize; 4]) -> Self {
        Params {
            dims,
            tensors: std::array::from_fn(|i| vec![F::zero(); param_len(dims, i)]),
        }
    }
}

fn param_len(dims: [usize; 4], i: usize) -> usize {
    let l = i / 2;
    if i.is_multiple_of(2) {
        dims[l] * dims[l + 1]
    } else {
        dims[l + 1]
    }
}

impl Params<f32> {
    pub fn from_tensors(
        tensors: &[ModelTensor],
        input_dim: usize,
        classes: usize,
    ) -> Result<Self, TaskError> {
        let specs = model_specs(input_dim, classes);
        let dims = [input_dim, HIDDEN, HIDDEN, classes];
        let mut out = Params::zeros_like(dims);
        for (i, (name, shape)) in specs.iter().enumerate() {
            let t = tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| TaskError::MissingTensor(name.clone()))?;
            if &t.shape != shape || t.data.len() != param_len(dims, i) {
                return Err(TaskError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
            out.tensors[i] = t.data.clone();
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> Vec<ModelTensor> {
        model_specs(self.dims[0], self.dims[3])
            .into_iter()
            .zip(self.tensors.iter())
            .map(|((name, shape), data)| ModelTensor::new(name, shape, data.clone()))
            .collect()
    }

    pub fn to_f64(&self) -> Params<f64> {
        Params {
            dims: self.dims,
            tensors: std::array::from_fn(|i| self.tensors[i].iter().map(|&v| f64::from(v)).collect()),
        }
    }
}

/// `out[b, j] = sum_i x[b, i] * w[i, j] + bias[j]`.
fn affine<F: Float>(x: &[F], w: &[F], bias: &[F], fan_in: usize, fan_out: usize) -> Vec<F> {
    let batch = x.len() / fan_in;
    let mut out = Vec::with_capacity(batch * fan_out);
    for b in 0..batch {
        let row = &x[b * fan_in..(b + 1) * fan_in];
        let start = out.len();
        out.extend_from_slice(bias);
        let acc = &mut out[start..];
        for (i, &xi) in row.iter().enumerate() {
            let wrow = &w[i * fan_out..(i + 1) * fan_out];
            for (a, &wij) in acc.iter_mut().zip(wrow) {
                *a = *a + xi * wij;
            }
        }
    }
    out
}

struct Forward<F> {
    /// Layer inputs: x, h1, h2.
    inputs: [Vec<F>; 3],
    /// Pre-activations of the two hidden layers.
    pre: [Vec<F>; 2],
    probs: Vec<F>,
    /// Per-sample cross-entropy.
    losses: Vec<F>,
}

fn forward<F: Float>(p: &Params<F>, x: &[F], labels: &[u32]) -> Forward<F> {
    let d = p.dims;
    let z1 = affine(x, &p.tensors[0], &p.tensors[1], d[0], d[1]);
    let h1: Vec<F> = z1.iter().map(|&z| z.max(F::zero())).collect();
    let z2 = affine(&h1, &p.tensors[2], &p.tensors[3], d[1], d[2]);
    let h2: Vec<F> = z2.iter().map(|&z| z.max(F::zero())).collect();
    let logits = affine(&h2, &p.tensors[4], &p.tensors[5], d[2], d[3]);
    let classes = d[3];
    let mut probs = Vec::with_capacity(logits.len());
    let mut losses = Vec::with_capacity(labels.len());
    for (b, row) in logits.chunks(classes).enumerate() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let start = probs.len();
        probs.extend(row.iter().map(|&v| (v - max).exp()));
        let sum = probs[start..].iter().fold(F::zero(), |s, &e| s + e);
        probs[start..].iter_mut().for_each(|e| *e = *e / sum);
        let lse = max + sum.ln();
        losses.push(lse - row[labels[b] as usize]);
    }
    Forward {
        inputs: [x.to_vec(), h1, h2],
        pre: [z1, z2],
        probs,
        losses,
    }
}

/// Gradient of the mean cross-entropy over the batch.
fn backward<F: Float>(p: &Params<F>, fwd: &Forward<F>, labels: &[u32]) -> Params<F> {
    let d = p.dims;
    let batch = labels.len();
    let inv_b = F::one() / F::from(batch).unwrap();
    let mut grads = Params::zeros_like(d);
    let mut delta: Vec<F> = fwd.probs.clone();
    for (b, &y) in labels.iter().enumerate() {
        delta[b * d[3] + y as usize] = delta[b * d[3] + y as usize] - F::one();
    }
    for v in delta.iter_mut() {
        *v = *v * inv_b;
    }
    for layer in (0..3).rev() {
        let (fan_in, fan_out) = (d[layer], d[layer + 1]);
        let input = &fwd.inputs[layer];
        let (gw, gb) = {
            let (left, right) = grads.tensors.split_at_mut(2 * layer + 1);
            (&mut left[2 * layer], &mut right[0])
        };
        for b in 0..batch {
            let drow = &delta[b * fan_out..(b + 1) * fan_out];
            let xrow = &input[b * fan_in..(b + 1) * fan_in];
            for (g, &dv) in gb.iter_mut().zip(drow) {
                *g = *g + dv;
            }
            for (i, &xi) in xrow.iter().enumerate() {
                if xi == F::zero() {
                    continue;
                }
                let grow = &mut gw[i * fan_out..(i + 1) * fan_out];
                for (g, &dv) in grow.iter_mut().zip(drow) {
                    *g = *g + xi * dv;
                }
            }
        }
        if layer == 0 {
            break;
        }
        let w = &p.tensors[2 * layer];
        let pre = &fwd.pre[layer - 1];
        let mut next = vec![F::zero(); batch * fan_in];
        for b in 0..batch {
            let drow = &delta[b * fan_out..(b + 1) * fan_out];
            for i in 0..fan_in {
                if pre[b * fan_in + i] <= F::zero() {
                    continue;
                }
                let wrow = &w[i * fan_out..(i + 1) * fan_out];
                next[b * fan_in + i] = wrow
                    .iter()
                    .zip(drow)
                    .fold(F::zero(), |s, (&wv, &dv)| s + wv * dv);
            }
        }
        delta = next;
    }
    grads
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptTreatment {
    /// Fresh optimizer state every round.
    Reset,
    /// Local optimizer state survives while weights come from the global model.
    ContinueGlobal,
}

/// Training settings taken from a task's hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub treatment: OptTreatment,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            epochs_per_round: 1,
            learning_rate: 0.05,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            treatment: OptTreatment::Reset,
        }
    }
}

impl TrainSettings {
    pub fn from_hyperparams(h: &Hyperparams) -> Result<Self, TaskError> {
        let d = TrainSettings::default();
        let bad = |key: &str, message: &str| TaskError::BadHyperparam {
            key: key.into(),
            message: message.into(),
        };
        let optimizer = match hyper_str(h, "optimizer", "sgd")?.to_ascii_lowercase().as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            _ => return Err(bad("optimizer", "expected sgd or adam")),
        };
        let treatment = match hyper_str(h, "opt_treatment", "RESET")?.to_ascii_uppercase().as_str() {
            "RESET" => OptTreatment::Reset,
            "CONTINUE_GLOBAL" => OptTreatment::ContinueGlobal,
            _ => return Err(bad("opt_treatment", "expected RESET or CONTINUE_GLOBAL")),
        };
        let learning_rate = hyper_f64(h, "learning_rate", f64::from(d.learning_rate))?;
        if learning_rate < 0.0 {
            return Err(bad("learning_rate", "must not be negative"));
        }
        Ok(TrainSettings {
            batch_size: hyper_positive(h, "batch_size", d.batch_size as u64)?,
            epochs_per_round: hyper_u64(h, "epochs_per_round", d.epochs_per_round as u64)? as usize,
            learning_rate: learning_rate as f32,
            seed: hyper_u64(h, "seed", d.seed)?,
            optimizer,
            treatment,
        })
    }
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f32, dims: [usize; 4]) -> Self {
        let zeros = || (0..6).map(|i| vec![0.0; param_len(dims, i)]).collect();
        OptimizerState {
            kind,
            learning_rate,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
                    for (w, &gv) in p.iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                self.step += 1;
                let t = self.step.min(i32::MAX as u64) as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..6 {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for ((w, &gv), (mv, vv)) in params.tensors[i]
                        .iter_mut()
                        .zip(&grads.tensors[i])
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn batch_of(data: &SyntheticDataset, indices: &[usize]) -> (Vec<f32>, Vec<u32>) {
    let mut x = Vec::with_capacity(indices.len() * data.dim);
    let mut y = Vec::with_capacity(indices.len());
    for &n in indices {
        x.extend_from_slice(data.row(n));
        y.push(data.labels[n]);
    }
    (x, y)
}

/// Deterministic sample order for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mix = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = Xoshiro256StarStar::seed_from_u64(mix);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs `settings.epochs_per_round` epochs starting at global epoch
/// `first_epoch`. Returns the mean per-sample loss seen during training.
pub fn train_epochs(
    params: &mut Params<f32>,
    optimizer: &mut OptimizerState,
    data: &SyntheticDataset,
    settings: &TrainSettings,
    first_epoch: u64,
) -> f64 {
    let mut loss_sum = 0.0f64;
    let mut seen = 0usize;
    for e in 0..settings.epochs_per_round as u64 {
        let order = epoch_order(data.len(), settings.seed, first_epoch + e);
        for chunk in order.chunks(settings.batch_size) {
            let (x, y) = batch_of(data, chunk);
            let fwd = forward(params, &x, &y);
            loss_sum += fwd.losses.iter().map(|&l| f64::from(l)).sum::<f64>();
            seen += y.len();
            let grads = backward(params, &fwd, &y);
            optimizer.apply(params, &grads);
        }
    }
    if seen == 0 {
        0.0
    } else {
        loss_sum / seen as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(params: &Params<f32>, data: &SyntheticDataset) -> Evaluation {
    if data.is_empty() {
        return Evaluation {
            accuracy: 0.0,
            loss: 0.0,
        };
    }
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let (x, y) = batch_of(data, chunk);
        let fwd = forward(params, &x, &y);
        loss += fwd.losses.iter().map(|&l| f64::from(l)).sum::<f64>();
        for (b, row) in fwd.probs.chunks(data.classes).enumerate() {
            if argmax(row) == y[b] as usize {
                correct += 1;
            }
        }
    }
    Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities for every sample, row-major.
pub fn predict(params: &Params<f32>, data: &SyntheticDataset) -> Vec<f32> {
    let (x, y) = batch_of(data, &(0..data.len()).collect::<Vec<_>>());
    forward(params, &x, &y).probs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
    /// Parameters whose step had to shrink because `+h` or `-h` moved a
    /// ReLU input across zero.
    pub refined: usize,
    pub parameters: usize,
}

/// Relative errors below this absolute scale are not meaningful in f64 at
/// the nominal step.
const GRAD_FLOOR: f64 = 1e-8;

/// Compares backprop against central differences with step `h` for every
/// parameter, all in f64. The five-point stencil is used because the
/// three-point one's O(h^2) error at h = 1e-3 swamps gradient components
/// several orders below the largest. Where the stencil would change the
/// ReLU activation pattern the loss is not smooth over it, so the step is
/// shrunk until the pattern holds.
pub fn gradient_check(params: &Params<f32>, x: &[f32], labels: &[u32], h: f64) -> GradCheckReport {
    let p64 = params.to_f64();
    let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    gradient_check_f64(&p64, &x64, labels, h)
}

pub fn gradient_check_f64(p: &Params<f64>, x: &[f64], labels: &[u32], h: f64) -> GradCheckReport {
    let mean_loss = |q: &Params<f64>| -> (f64, Vec<bool>) {
        let f = forward(q, x, labels);
        let pattern = f.pre.iter().flatten().map(|&z| z > 0.0).collect();
        (f.losses.iter().sum::<f64>() / labels.len() as f64, pattern)
    };
    let fwd = forward(p, x, labels);
    let analytic = backward(p, &fwd, labels);
    let (_, base_pattern) = mean_loss(p);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_gradient: 0.0,
        refined: 0,
        parameters: 0,
    };
    let mut probe = p.clone();
    for t in 0..6 {
        for i in 0..probe.tensors[t].len() {
            let original = probe.tensors[t][i];
            let mut step = h;
            let numeric = loop {
                let mut at = |offset: f64| {
                    probe.tensors[t][i] = original + offset;
                    mean_loss(&probe)
                };
                let (p1, s1) = at(step);
                let (m1, s2) = at(-step);
                let (p2, s3) = at(2.0 * step);
                let (m2, s4) = at(-2.0 * step);
                let smooth = [s1, s2, s3, s4].iter().all(|s| *s == base_pattern);
                if smooth || step < h * 1e-4 {
                    break (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step);
                }
                step /= 10.0;
            };
            if step < h {
                report.refined += 1;
            }
            probe.tensors[t][i] = original;
            let a = analytic.tensors[t][i];
            // roundoff in the stencil grows as 1/step, so a shrunk step
            // resolves proportionally less
            let floor = GRAD_FLOOR * (h / step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.max_abs_gradient = report.max_abs_gradient.max(a.abs());
            report.parameters += 1;
        }
    }
    report
}

/// Largest |analytic - numeric| over all parameters for step `h`, skipping
/// none. Used to observe the O(h^2) convergence of central differences.
pub fn max_fd_discrepancy(p: &Params<f64>, x: &[f64], labels: &[u32], h: f64) -> f64 {
    let loss = |q: &Params<f64>| forward(q, x, labels).losses.iter().sum::<f64>() / labels.len() as f64;
    let analytic = backward(p, &forward(p, x, labels), labels);
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    for t in 0..6 {
        for i in 0..probe.tensors[t].len() {
            let original = probe.tensors[t][i];
            probe.tensors[t][i] = original + h;
            let plus = loss(&probe);
            probe.tensors[t][i] = original - h;
            let minus = loss(&probe);
            probe.tensors[t][i] = original;
            worst = worst.max((analytic.tensors[t][i] - (plus - minus) / (2.0 * h)).abs());
        }
    }
    worst
}

/// The built-in runner: one collaborator's shard of the blobs dataset.
#[derive(Debug, Clone)]
pub struct ReferenceRunner {
    pub config: DatasetConfig,
    pub train_data: SyntheticDataset,
    pub held_out: SyntheticDataset,
    optimizer: Option<OptimizerState>,
}

impl ReferenceRunner {
    pub fn new(config: DatasetConfig, shard_index: usize, shard_count: usize) -> Result<Self, TaskError> {
        if shard_count == 0 || shard_index == 0 || shard_index > shard_count {
            return Err(TaskError::BadShard {
                index: shard_index,
                count: shard_count,
            });
        }
        let (train, held_out) = SyntheticDataset::generate(&config);
        Ok(ReferenceRunner {
            train_data: train.shard(shard_index, shard_count),
            held_out: held_out.shard(shard_index, shard_count),
            config,
            optimizer: None,
        })
    }

    /// Unsharded data, as used by the centralized baseline.
    pub fn pooled(config: DatasetConfig) -> Self {
        Self::new(config, 1, 1).expect("1 of 1 is a valid shard")
    }

    pub fn from_plan(plan: &FlPlan, shard_index: usize, shard_count: usize) -> Result<Self, TaskError> {
        Self::new(DatasetConfig::from_plan(plan)?, shard_index, shard_count)
    }

    pub fn initial_model(&self) -> Vec<ModelTensor> {
        init_model(self.config.input_dim(), self.config.classes, self.config.model_seed)
    }

    fn params(&self, model: &[ModelTensor]) -> Result<Params<f32>, TaskError> {
        Params::from_tensors(model, self.config.input_dim(), self.config.classes)
    }

    /// Trains `rounds` consecutive rounds locally, feeding each round's
    /// output into the next. This is the schedule a single-member
    /// federation reproduces.
    pub fn train_standalone(
        &mut self,
        model: Vec<ModelTensor>,
        hyperparams: &Hyperparams,
        rounds: u32,
    ) -> Result<Vec<ModelTensor>, TaskError> {
        let mut current = model;
        for round in 0..rounds {
            current = self.train(&current, hyperparams, round)?.tensors;
        }
        Ok(current)
    }
}

impl TaskRunner for ReferenceRunner {
    fn tensor_specs(&self) -> Vec<(String, Vec<u32>)> {
        model_specs(self.config.input_dim(), self.config.classes)
    }

    fn train(
        &mut self,
        model: &[ModelTensor],
        hyperparams: &Hyperparams,
        round: u32,
    ) -> Result<TrainOutput, TaskError> {
        let settings = TrainSettings::from_hyperparams(hyperparams)?;
        let mut params = self.params(model)?;
        let dims = params.dims;
        let keep = settings.treatment == OptTreatment::ContinueGlobal
            && self
                .optimizer
                .as_ref()
                .is_some_and(|o| o.kind == settings.optimizer);
        let mut optimizer = match self.optimizer.take() {
            Some(mut o) if keep => {
                o.learning_rate = settings.learning_rate;
                o
            }
            _ => OptimizerState::new(settings.optimizer, settings.learning_rate, dims),
        };
        let first_epoch = u64::from(round) * settings.epochs_per_round as u64;
        let loss = train_epochs(&mut params, &mut optimizer, &self.train_data, &settings, first_epoch);
        self.optimizer = Some(optimizer);
        let mut metrics = BTreeMap::new();
        metrics.insert("train_loss".to_string(), loss);
        Ok(TrainOutput {
            tensors: params.to_tensors(),
            data_size: self.train_data.len() as u64,
            metrics,
        })
    }

    fn validate(
        &mut self,
        model: &[ModelTensor],
        _hyperparams: &Hyperparams,
        _round: u32,
    ) -> Result<ValidateOutput, TaskError> {
        let params = self.params(model)?;
        let eval = evaluate(&params, &self.held_out);
        let mut metrics = BTreeMap::new();
        metrics.insert("accuracy".to_string(), eval.accuracy);
        metrics.insert("loss".to_string(), eval.loss);
        Ok(ValidateOutput {
            metrics,
            data_size: self.held_out.len() as u64,
        })
    }
}

/// Hyperparameters of a plan's TRAIN task, for standalone use.
pub fn train_hyperparams(plan: &FlPlan) -> Hyperparams {
    plan.first_train_task()
        .map(|t| t.hyperparams.clone())
        .unwrap_or_default()
}

pub fn hyper(pairs: &[(&str, HyperValue)]) -> Hyperparams {
    let mut h = Hyperparams::default();
    for (k, v) in pairs {
        h.insert(*k, v.clone());
    }
    h
}
