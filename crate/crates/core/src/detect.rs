//! Mode 1 radar detection from stacked KPM windows.
//!
//! A window stacks the latest `N` KPM records, oldest first, with `M = 4`
//! features each (throughput, BLER, MCS, BSR). The classifier is a small
//! fully connected network (ReLU hidden layers, softmax over {no radar,
//! radar}) trained with RMSprop on sparse categorical cross-entropy, with
//! z-score normalization fitted on the training split only.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranlink::KpmRecord;

pub const FEATURES_PER_RECORD: usize = 4;
pub const NUM_CLASSES: usize = 2;
pub const MODEL_FORMAT: &str = "odss-kpm-detector";
pub const MODEL_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KpmWindow {
    features: Vec<f64>,
    n_stack: usize,
    n_features: usize,
}

impl KpmWindow {
    pub fn new(features: Vec<f64>, n_stack: usize, n_features: usize) -> Result<Self> {
        if features.len() != n_stack * n_features {
            return Err(Error::DimensionMismatch {
                expected: n_stack * n_features,
                got: features.len(),
            });
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidParams("window features must be finite".into()));
        }
        Ok(KpmWindow {
            features,
            n_stack,
            n_features,
        })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn n_stack(&self) -> usize {
        self.n_stack
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn record_features(r: &KpmRecord) -> [f64; FEATURES_PER_RECORD] {
    [r.throughput_mbps, r.bler_pct, r.mcs as f64, r.bsr_bytes as f64]
}

/// Streaming windower: emits one window per record once `n_stack` exist.
#[derive(Debug, Clone)]
pub struct KpmWindower {
    n_stack: usize,
    recent: VecDeque<KpmRecord>,
}

impl KpmWindower {
    pub fn new(n_stack: usize) -> Result<Self> {
        if n_stack == 0 {
            return Err(Error::InvalidParams("window stack N must be >= 1".into()));
        }
        Ok(KpmWindower {
            n_stack,
            recent: VecDeque::with_capacity(n_stack),
        })
    }

    pub fn push(&mut self, record: KpmRecord) -> Option<KpmWindow> {
        if self.recent.len() == self.n_stack {
            self.recent.pop_front();
        }
        self.recent.push_back(record);
        if self.recent.len() < self.n_stack {
            return None;
        }
        let features = self.recent.iter().flat_map(record_features).collect();
        Some(KpmWindow {
            features,
            n_stack: self.n_stack,
            n_features: FEATURES_PER_RECORD,
        })
    }

    pub fn reset(&mut self) {
        self.recent.clear();
    }
}

/// Sliding windows over a record stream; `len - N + 1` windows.
pub fn window_kpms(records: &[KpmRecord], n_stack: usize) -> Result<Vec<KpmWindow>> {
    let mut windower = KpmWindower::new(n_stack)?;
    Ok(records.iter().filter_map(|r| windower.push(*r)).collect())
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs][inputs]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

/// Fully connected network, ReLU between layers, softmax on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Activations of every layer, input first, softmax probabilities last.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.forward(acts.last().expect("input pushed"), &mut z);
            if i + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                softmax_in_place(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().expect("at least one layer")
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_gradients(&self, xs: &[&[f64]], labels: &[usize]) -> (f64, Gradients) {
        let mut grads = Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        };
        let scale = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        for (x, &label) in xs.iter().zip(labels) {
            let acts = self.activations(x);
            let probs = acts.last().expect("output");
            loss -= probs[label].max(1e-300).ln() * scale;
            // dL/dz at the softmax input.
            let mut delta: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, p)| (p - if k == label { 1.0 } else { 0.0 }) * scale)
                .collect();
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                for (o, d) in delta.iter().enumerate() {
                    grads.bias[li][o] += d;
                    let row = &mut grads.weights[li][o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                }
                if li == 0 {
                    break;
                }
                delta = (0..layer.inputs)
                    .map(|j| {
                        if input[j] <= 0.0 {
                            return 0.0;
                        }
                        delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| d * layer.weights[o * layer.inputs + j])
                            .sum()
                    })
                    .collect();
            }
        }
        (loss, grads)
    }

    pub fn loss(&self, xs: &[&[f64]], labels: &[usize]) -> f64 {
        xs.iter()
            .zip(labels)
            .map(|(x, &l)| -self.predict_proba(x)[l].max(1e-300).ln())
            .sum::<f64>()
            / xs.len() as f64
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// RMSprop with the common deep-learning defaults (rho 0.9, eps 1e-7).
#[derive(Debug, Clone)]
struct RmsProp {
    lr: f64,
    rho: f64,
    eps: f64,
    weights_sq: Vec<Vec<f64>>,
    bias_sq: Vec<Vec<f64>>,
}

impl RmsProp {
    fn new(net: &Mlp, lr: f64) -> Self {
        RmsProp {
            lr,
            rho: 0.9,
            eps: 1e-7,
            weights_sq: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias_sq: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        let (lr, rho, eps) = (self.lr, self.rho, self.eps);
        let update = |params: &mut [f64], g: &[f64], sq: &mut [f64]| {
            for ((p, g), s) in params.iter_mut().zip(g).zip(sq.iter_mut()) {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            }
        };
        for (li, layer) in net.layers.iter_mut().enumerate() {
            update(&mut layer.weights, &grads.weights[li], &mut self.weights_sq[li]);
            update(&mut layer.bias, &grads.bias[li], &mut self.bias_sq[li]);
        }
    }
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub format: String,
    pub version: u32,
    pub n_stack: usize,
    pub n_features: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub network: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub radar_present: bool,
    /// Probability of the winning class.
    pub confidence: f64,
    pub p_radar: f64,
}

impl ClassifierModel {
    pub fn input_size(&self) -> usize {
        self.n_stack * self.n_features
    }

    fn normalized(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(&self.norm_mean)
            .zip(&self.norm_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingModel);
        }
        let text = fs::read_to_string(path)?;
        let model: ClassifierModel = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported model {} v{}", model.format, model.version),
            ));
        }
        if model.network.input_size() != model.input_size()
            || model.norm_mean.len() != model.input_size()
            || model.norm_std.len() != model.input_size()
            || model.norm_std.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::format(path, "inconsistent model dimensions"));
        }
        Ok(model)
    }
}

/// Argmax of the softmax output; an exact tie resolves to "no radar".
pub fn infer(model: &ClassifierModel, window: &KpmWindow) -> Result<Detection> {
    if window.len() != model.input_size() {
        return Err(Error::DimensionMismatch {
            expected: model.input_size(),
            got: window.len(),
        });
    }
    let probs = model.network.predict_proba(&model.normalized(window.features()));
    let radar_present = probs[1] > probs[0];
    Ok(Detection {
        radar_present,
        confidence: if radar_present { probs[1] } else { probs[0] },
        p_radar: probs[1],
    })
}

pub fn infer_batch(model: &ClassifierModel, windows: &[KpmWindow]) -> Result<Vec<Detection>> {
    windows.iter().map(|w| infer(model, w)).collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: KpmWindow,
    /// 0 = no radar, 1 = radar.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub hidden_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 50,
            batch_size: 128,
            train_fraction: 0.75,
            hidden_layers: vec![32, 16],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParams(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParams(
                "learning rate, epochs and batch size must be positive".into(),
            ));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::InvalidParams("hidden layers must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub model: ClassifierModel,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Seeded shuffle, then the first `fraction` of indices train.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * fraction).round() as usize;
    let val = idx.split_off(cut.min(n));
    (idx, val)
}

/// Per-feature mean and population stddev; zero-variance features get 1.
pub fn fit_normalization(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, |r| r.len());
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let std = var
        .into_iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, std)
}

pub fn accuracy(model: &ClassifierModel, items: &[&LabeledWindow]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for item in items {
        if infer(model, &item.window)?.radar_present == (item.label == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

pub fn train_detector(dataset: &[LabeledWindow], config: &TrainConfig) -> Result<TrainedDetector> {
    config.validate()?;
    if dataset.len() < 2 * config.batch_size {
        return Err(Error::DegenerateDataset(format!(
            "{} windows, need at least {}",
            dataset.len(),
            2 * config.batch_size
        )));
    }
    if dataset.iter().any(|d| d.label as usize >= NUM_CLASSES) {
        return Err(Error::DegenerateDataset("labels must be 0 or 1".into()));
    }
    let positives = dataset.iter().filter(|d| d.label == 1).count();
    if positives == 0 || positives == dataset.len() {
        return Err(Error::DegenerateDataset("dataset contains a single class".into()));
    }
    let first = &dataset[0].window;
    let (n_stack, n_features) = (first.n_stack(), first.n_features());
    if let Some(bad) = dataset.iter().find(|d| d.window.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            expected: first.len(),
            got: bad.window.len(),
        });
    }

    let (train_idx, val_idx) = split_indices(dataset.len(), config.train_fraction, config.seed);
    let train_rows: Vec<&[f64]> = train_idx.iter().map(|&i| dataset[i].window.features()).collect();
    let (norm_mean, norm_std) = fit_normalization(&train_rows);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut sizes = vec![first.len()];
    sizes.extend(&config.hidden_layers);
    sizes.push(NUM_CLASSES);
    let mut model = ClassifierModel {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        n_stack,
        n_features,
        norm_mean,
        norm_std,
        network: Mlp::new(&sizes, &mut rng),
    };

    let inputs: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| model.normalized(dataset[i].window.features()))
        .collect();
    let labels: Vec<usize> = train_idx.iter().map(|&i| dataset[i].label as usize).collect();
    let mut optimizer = RmsProp::new(&model.network, config.learning_rate);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grads) = model.network.loss_and_gradients(&xs, &ys);
            optimizer.step(&mut model.network, &grads);
        }
    }

    let train_items: Vec<&LabeledWindow> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_items: Vec<&LabeledWindow> = val_idx.iter().map(|&i| &dataset[i]).collect();
    Ok(TrainedDetector {
        train_accuracy: accuracy(&model, &train_items)?,
        validation_accuracy: accuracy(&model, &val_items)?,
        model,
        train_indices: train_idx,
        validation_indices: val_idx,
    })
}
