//! Five-layer mirrored autoencoder over normalized KPI snapshots.
//!
//! Layer widths are `n, n/2, n/4, n/2, n`. Hidden layers use `tanh`, the
//! output layer is linear because z-scored inputs span the whole real line.
//! The model yields two signals:
//!
//! * the global reconstruction error (mean squared error over all KPIs),
//!   thresholded at [`DEFAULT_GLOBAL_THRESHOLD`];
//! * the set of anomalous KPIs, i.e. KPIs whose squared error exceeds
//!   `mean + 3 * std` of that KPI's squared error on the training data.
//!
//! Inputs are clamped to `±input_clip` (default [`DEFAULT_INPUT_CLIP`])
//! before the forward pass and errors are measured against the clamped
//! input. A single KPI tens of deviations away would otherwise saturate the
//! hidden layers and spoil the reconstruction of every other KPI.

use crate::error::{Error, Result};
use crate::persist::{self, FORMAT_VERSION};
use crate::telemetry::{Series, Snapshot};
use crate::training::{seeded_rng, shuffled_indices, TrainConfig};
use crate::State;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_GLOBAL_THRESHOLD: f64 = 1.0;

/// Bound, in standard deviations, applied to every normalized input.
pub const DEFAULT_INPUT_CLIP: f64 = 3.0;

/// Number of training-error standard deviations above the mean at which a
/// KPI is considered anomalous.
pub const KPI_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z = self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            out.push(self.activation.apply(z));
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-KPI mean and standard deviation of squared reconstruction errors on
/// the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub format_version: u32,
    layers: Vec<Layer>,
    error_stats: Option<ErrorStats>,
    global_threshold: f64,
    #[serde(default)]
    input_clip: Option<f64>,
    config: Option<TrainConfig>,
    /// Mean training loss at initialization followed by one entry per epoch.
    training_losses: Vec<f64>,
}

/// Layer widths of the mirrored autoencoder for `n` KPIs.
pub fn layer_sizes(n: usize) -> Result<[usize; 5]> {
    if n < 4 {
        return Err(Error::Architecture(format!(
            "autoencoder needs at least 4 KPIs so the innermost layer is non-empty, got {n}"
        )));
    }
    Ok([n, n / 2, n / 4, n / 2, n])
}

impl AutoencoderModel {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn initialize(n: usize, seed: u64) -> Result<Self> {
        let sizes = layer_sizes(n)?;
        let mut rng = seeded_rng(seed, 1);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = 1.0 / (inputs as f64).sqrt();
                Layer {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; outputs],
                    activation: if l == sizes.len() - 2 { Activation::Identity } else { Activation::Tanh },
                }
            })
            .collect();
        Ok(Self {
            format_version: FORMAT_VERSION,
            layers,
            error_stats: None,
            global_threshold: DEFAULT_GLOBAL_THRESHOLD,
            input_clip: Some(DEFAULT_INPUT_CLIP),
            config: None,
            training_losses: Vec::new(),
        })
    }

    /// Builds a model from explicit layers. Dimensions must chain and the
    /// first input must equal the last output. Inputs are not clamped.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Architecture("no layers".into()))?;
        let last = layers.last().unwrap();
        if first.inputs != last.outputs {
            return Err(Error::Architecture(format!(
                "input width {} differs from output width {}",
                first.inputs, last.outputs
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Architecture(format!("layer {i} has inconsistent parameter shapes")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Architecture(format!("layer {i} input width does not chain")));
            }
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            layers,
            error_stats: None,
            global_threshold: DEFAULT_GLOBAL_THRESHOLD,
            input_clip: None,
            config: None,
            training_losses: Vec::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    pub fn error_stats(&self) -> Option<&ErrorStats> {
        self.error_stats.as_ref()
    }

    pub fn set_error_stats(&mut self, stats: ErrorStats) -> Result<()> {
        if stats.mean.len() != self.width() || stats.std.len() != self.width() {
            return Err(Error::Schema("error statistics length differs from model width".into()));
        }
        self.error_stats = Some(stats);
        Ok(())
    }

    pub fn global_threshold(&self) -> f64 {
        self.global_threshold
    }

    pub fn set_global_threshold(&mut self, threshold: f64) -> Result<()> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::Parameter(format!("global threshold must be positive, got {threshold}")));
        }
        self.global_threshold = threshold;
        Ok(())
    }

    pub fn input_clip(&self) -> Option<f64> {
        self.input_clip
    }

    /// `None` disables clamping. Error statistics computed under another
    /// bound are dropped.
    pub fn with_input_clip(mut self, clip: Option<f64>) -> Result<Self> {
        if let Some(c) = clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Parameter(format!("input clip must be positive, got {c}")));
            }
        }
        if clip != self.input_clip {
            self.error_stats = None;
        }
        self.input_clip = clip;
        Ok(self)
    }

    /// The input as the network sees it.
    fn clamped(&self, values: &[f64]) -> Vec<f64> {
        match self.input_clip {
            Some(c) => values.iter().map(|x| x.clamp(-c, c)).collect(),
            None => values.to_vec(),
        }
    }

    pub fn config(&self) -> Option<&TrainConfig> {
        self.config.as_ref()
    }

    pub fn training_losses(&self) -> &[f64] {
        &self.training_losses
    }

    fn check_width(&self, len: usize) -> Result<()> {
        if len != self.width() {
            return Err(Error::Schema(format!(
                "snapshot has {len} values, autoencoder expects {}",
                self.width()
            )));
        }
        Ok(())
    }

    /// Activations of every layer, input included.
    fn forward_all(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward_into(acts.last().unwrap(), &mut out);
            acts.push(out);
        }
        acts
    }

    pub fn reconstruct(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_width(values.len())?;
        let mut cur = self.clamped(values);
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Squared reconstruction error of every KPI, against the clamped input.
    pub fn squared_errors(&self, values: &[f64]) -> Result<Vec<f64>> {
        let out = self.reconstruct(values)?;
        let input = self.clamped(values);
        Ok(input.iter().zip(&out).map(|(x, y)| (x - y) * (x - y)).collect())
    }

    pub fn global_error(&self, values: &[f64]) -> Result<f64> {
        let sq = self.squared_errors(values)?;
        Ok(sq.iter().sum::<f64>() / sq.len() as f64)
    }

    /// Indices (ascending) of KPIs whose squared error exceeds
    /// `mean + 3 * std` of their training errors.
    pub fn anomalous_kpis(&self, values: &[f64]) -> Result<Vec<usize>> {
        let stats = self
            .error_stats
            .as_ref()
            .ok_or_else(|| Error::NotCalibrated("autoencoder has no training error statistics".into()))?;
        let sq = self.squared_errors(values)?;
        Ok(sq
            .iter()
            .enumerate()
            .filter(|&(i, e)| *e > stats.mean[i] + KPI_SIGMA * stats.std[i])
            .map(|(i, _)| i)
            .collect())
    }

    pub fn classify_state(&self, values: &[f64]) -> Result<State> {
        Ok(if self.global_error(values)? > self.global_threshold {
            State::Anomalous
        } else {
            State::Normal
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters, layer by layer: weights (row-major) then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Schema(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + w]);
            off += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + b]);
            off += b;
        }
        Ok(())
    }

    /// Mean squared reconstruction error of `batch` and its gradient with
    /// respect to [`parameters`](Self::parameters).
    pub fn loss_and_gradient(&self, batch: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.param_count()];
        let loss = self.accumulate_gradient(batch, &mut grad)?;
        Ok((loss, grad))
    }

    fn accumulate_gradient(&self, batch: &[&[f64]], grad: &mut [f64]) -> Result<f64> {
        let n = self.width();
        let scale = 1.0 / (n as f64 * batch.len() as f64);
        // Offsets of each layer's block in the flat parameter vector.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for x in batch {
            self.check_width(x.len())?;
            let x = self.clamped(x);
            let acts = self.forward_all(&x);
            let out = acts.last().unwrap();
            let mut delta: Vec<f64> = out
                .iter()
                .zip(x.iter())
                .map(|(y, t)| {
                    loss += (y - t) * (y - t);
                    2.0 * (y - t) * scale
                })
                .collect();
            for (li, layer) in self.layers.iter().enumerate().rev() {
                let a_in = &acts[li];
                let a_out = &acts[li + 1];
                for (d, a) in delta.iter_mut().zip(a_out) {
                    *d *= layer.activation.derivative_from_output(*a);
                }
                let base = offsets[li];
                let wlen = layer.weights.len();
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                    grad[base + wlen + o] += d;
                }
                if li > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for o in 0..layer.outputs {
                        let d = delta[o];
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    delta = prev;
                }
            }
        }
        Ok(loss * scale)
    }

    fn apply_step(&mut self, grad: &[f64], lr: f64) {
        let mut off = 0;
        for l in &mut self.layers {
            for w in &mut l.weights {
                *w -= lr * grad[off];
                off += 1;
            }
            for b in &mut l.bias {
                *b -= lr * grad[off];
                off += 1;
            }
        }
    }

    fn mean_loss(&self, data: &[&[f64]]) -> f64 {
        data.iter()
            .map(|x| self.squared_errors(x).expect("width checked").iter().sum::<f64>() / x.len() as f64)
            .sum::<f64>()
            / data.len() as f64
    }

    fn compute_error_stats(&self, data: &[&[f64]]) -> ErrorStats {
        let n = self.width();
        let errors: Vec<Vec<f64>> = data.iter().map(|x| self.squared_errors(x).expect("width checked")).collect();
        let count = data.len() as f64;
        let mut mean = vec![0.0; n];
        for e in &errors {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for e in &errors {
            for ((acc, v), m) in var.iter_mut().zip(e).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let denom = (count - 1.0).max(1.0);
        ErrorStats { mean, std: var.into_iter().map(|v| (v / denom).sqrt()).collect() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = persist::read_json(path.as_ref())?;
        persist::check_version(model.format_version, "autoencoder model")?;
        let sizes = model.sizes();
        Self::from_layers(model.layers.clone())?;
        if sizes.len() != 5 {
            return Err(Error::Architecture(format!("expected 5 layer sizes, found {}", sizes.len())));
        }
        Ok(model)
    }
}

/// Trains on a normalized series with mini-batch gradient descent.
///
/// The parameters with the lowest full-data loss seen (initialization
/// included) are kept, so the returned model never does worse on the
/// training data than its initialization.
pub fn train_autoencoder(train: &Series, cfg: &TrainConfig) -> Result<AutoencoderModel> {
    train_autoencoder_clipped(train, cfg, Some(DEFAULT_INPUT_CLIP))
}

/// [`train_autoencoder`] with an explicit input bound (`None` disables it).
pub fn train_autoencoder_clipped(train: &Series, cfg: &TrainConfig, clip: Option<f64>) -> Result<AutoencoderModel> {
    cfg.validate(false)?;
    let n = train.width();
    let mut model = AutoencoderModel::initialize(n, cfg.seed)?.with_input_clip(clip)?;
    if train.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "autoencoder training needs at least 10 snapshots, got {}",
            train.len()
        )));
    }
    let data: Vec<&[f64]> = train.snapshots().iter().map(|s| s.values.as_slice()).collect();
    let mut rng = seeded_rng(cfg.seed, 2);
    let mut grad = vec![0.0; model.param_count()];

    let initial = model.mean_loss(&data);
    if !initial.is_finite() {
        return Err(Error::Training { epoch: 0, message: format!("initial loss is {initial}") });
    }
    let mut losses = vec![initial];
    let mut best = (initial, model.parameters());
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(data.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i]).collect();
            model.accumulate_gradient(&batch, &mut grad)?;
            model.apply_step(&grad, cfg.learning_rate);
        }
        let loss = model.mean_loss(&data);
        if !loss.is_finite() {
            return Err(Error::Training { epoch, message: format!("loss became {loss}") });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, model.parameters());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    model.set_parameters(&best.1)?;
    model.error_stats = Some(model.compute_error_stats(&data));
    model.config = Some(cfg.clone());
    model.training_losses = losses;
    Ok(model)
}

pub fn reconstruct(model: &AutoencoderModel, snapshot: &Snapshot) -> Result<Vec<f64>> {
    model.reconstruct(&snapshot.values)
}

pub fn global_error(model: &AutoencoderModel, snapshot: &Snapshot) -> Result<f64> {
    model.global_error(&snapshot.values)
}

pub fn anomalous_kpis(model: &AutoencoderModel, snapshot: &Snapshot) -> Result<Vec<usize>> {
    model.anomalous_kpis(&snapshot.values)
}

pub fn classify_state_ae(model: &AutoencoderModel, snapshot: &Snapshot) -> Result<State> {
    model.classify_state(&snapshot.values)
}
