//! MC-dropout feedforward regression surrogate.
//!
//! A fully connected network with rectified-linear hidden layers and a
//! linear scalar output, trained with Adam on mean-squared error over
//! z-scored inputs and targets. Dropout (inverted scaling) sits after every
//! hidden activation and stays active at prediction time: each stochastic
//! pass draws one mask per hidden unit and applies it to every pool point,
//! so a pass is one coherent weight sample.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CandidatePool, ObservationSet};
use crate::error::{LseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    pub layers: usize,
    pub width: usize,
    pub activation: Activation,
}

impl NetworkArchitecture {
    pub fn new(layers: usize, width: usize) -> Result<Self> {
        if layers == 0 || width == 0 {
            return Err(LseError::invalid(format!(
                "architecture needs layers >= 1 and width >= 1, got ({layers}, {width})"
            )));
        }
        Ok(Self {
            layers,
            width,
            activation: Activation::Relu,
        })
    }
}

impl Default for NetworkArchitecture {
    fn default() -> Self {
        Self {
            layers: 1,
            width: 256,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinorHyperparams {
    pub learning_rate: f64,
    pub dropout_rate: f64,
}

impl MinorHyperparams {
    pub fn new(learning_rate: f64, dropout_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(LseError::invalid(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(LseError::invalid(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            learning_rate,
            dropout_rate,
        })
    }
}

/// Optimizer and stopping settings for [`train_bnn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingOptions {
    pub epochs: usize,
    /// Stop once the loss has not improved by `min_improvement` for this many epochs.
    pub patience: usize,
    pub min_improvement: f64,
    /// Full-batch updates up to this many observations, mini-batches above.
    pub full_batch_limit: usize,
    pub minibatch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            epochs: 1000,
            patience: 50,
            min_improvement: 1e-6,
            full_batch_limit: 1024,
            minibatch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

/// Parameter gradients, laid out like the network layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`DropoutSurrogate::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutSurrogate {
    architecture: NetworkArchitecture,
    layers: Vec<Dense>,
    dropout_rate: f64,
    input_mean: Array1<f64>,
    input_scale: Array1<f64>,
    output_mean: f64,
    output_scale: f64,
    loss_history: Vec<f64>,
}

struct ForwardCache {
    // inputs to each dense layer (post-mask activations for hidden ones)
    inputs: Vec<Array2<f64>>,
    // hidden pre-activations
    pre: Vec<Array2<f64>>,
    output: Array1<f64>,
}

fn z_stats(column: ArrayView1<f64>) -> (f64, f64) {
    let n = column.len() as f64;
    let mean = column.sum() / n;
    let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl DropoutSurrogate {
    /// Freshly initialized network with identity standardization.
    pub fn initialize(
        architecture: NetworkArchitecture,
        input_dim: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(architecture, input_dim, dropout_rate, &mut rng)
    }

    fn init_with_rng(
        architecture: NetworkArchitecture,
        input_dim: usize,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if architecture.layers == 0 || architecture.width == 0 || input_dim == 0 {
            return Err(LseError::invalid("empty network layer"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(LseError::invalid(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let mut layers = Vec::with_capacity(architecture.layers + 1);
        let mut fan_in = input_dim;
        for l in 0..=architecture.layers {
            let fan_out = if l == architecture.layers {
                1
            } else {
                architecture.width
            };
            // He init for rectified layers, Glorot-style for the linear head
            let gain = if l == architecture.layers { 1.0 } else { 2.0 };
            let std = (gain / fan_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            });
            layers.push(Dense {
                weights,
                bias: Array1::zeros(fan_out),
            });
            fan_in = fan_out;
        }
        Ok(Self {
            architecture,
            layers,
            dropout_rate,
            input_mean: Array1::zeros(input_dim),
            input_scale: Array1::ones(input_dim),
            output_mean: 0.0,
            output_scale: 1.0,
            loss_history: Vec::new(),
        })
    }

    pub fn architecture(&self) -> NetworkArchitecture {
        self.architecture
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    /// Per-epoch training loss (standardized units) from the last fit.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn standardize_inputs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.input_mean) / &self.input_scale
    }

    pub fn standardize_output(&self, y: f64) -> f64 {
        (y - self.output_mean) / self.output_scale
    }

    pub fn destandardize_output(&self, z: f64) -> f64 {
        z * self.output_scale + self.output_mean
    }

    /// Keep-mask for every hidden layer: entries are `0` or `1 / (1 - p)`.
    /// `rows == 1` produces a mask shared across all inputs.
    pub fn sample_masks<R: Rng>(&self, rows: usize, rng: &mut R) -> Vec<Array2<f64>> {
        let p = self.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        (0..self.architecture.layers)
            .map(|_| {
                if p == 0.0 {
                    Array2::ones((rows, self.architecture.width))
                } else {
                    Array2::from_shape_simple_fn((rows, self.architecture.width), || {
                        if rng.gen::<f64>() < p {
                            0.0
                        } else {
                            keep
                        }
                    })
                }
            })
            .collect()
    }

    fn forward(&self, x: ArrayView2<f64>, masks: Option<&[Array2<f64>]>) -> ForwardCache {
        let hidden = self.architecture.layers;
        let mut inputs = Vec::with_capacity(hidden + 1);
        let mut pre = Vec::with_capacity(hidden);
        let mut a = x.to_owned();
        for (l, layer) in self.layers[..hidden].iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            let mut act = z.mapv(|v| v.max(0.0));
            if let Some(m) = masks {
                act *= &m[l];
            }
            inputs.push(a);
            pre.push(z);
            a = act;
        }
        let head = &self.layers[hidden];
        let output = a.dot(&head.weights).column(0).to_owned() + head.bias[0];
        inputs.push(a);
        ForwardCache {
            inputs,
            pre,
            output,
        }
    }

    /// Mean-squared error and its gradient for standardized inputs/targets
    /// under fixed dropout masks.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        masks: &[Array2<f64>],
    ) -> (f64, Gradients) {
        let n = x.nrows() as f64;
        let cache = self.forward(x, Some(masks));
        let resid = &cache.output - &y;
        let loss = resid.dot(&resid) / n;

        let hidden = self.architecture.layers;
        let mut gw = vec![Array2::zeros((0, 0)); hidden + 1];
        let mut gb = vec![Array1::zeros(0); hidden + 1];

        let mut delta = (resid * (2.0 / n)).insert_axis(Axis(1));
        for l in (0..=hidden).rev() {
            let input = &cache.inputs[l];
            gw[l] = input.t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weights.t());
                back *= &masks[l - 1];
                ndarray::Zip::from(&mut back)
                    .and(&cache.pre[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                delta = back;
            }
        }
        (
            loss,
            Gradients {
                weights: gw,
                biases: gb,
            },
        )
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        if params.len() != total {
            return Err(LseError::invalid(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = params[pos];
                pos += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    /// Deterministic prediction (dropout off) in raw output units.
    pub fn predict(&self, points: ArrayView2<f64>) -> Array1<f64> {
        let xs = self.standardize_inputs(points);
        self.forward(xs.view(), None)
            .output
            .mapv(|z| self.destandardize_output(z))
    }

    /// One stochastic pass with a shared mask drawn from `rng`.
    fn stochastic_pass(&self, standardized: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let masks = self.sample_masks(1, rng);
        self.forward(standardized, Some(&masks))
            .output
            .mapv(|z| self.destandardize_output(z))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer(file, &Checkpoint::from(self))?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        ckpt.into_surrogate()
    }
}

const CHECKPOINT_FORMAT: &str = "lse-dropout-surrogate";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerDump {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: NetworkArchitecture,
    dropout_rate: f64,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    output_mean: f64,
    output_scale: f64,
    layers: Vec<LayerDump>,
}

impl From<&DropoutSurrogate> for Checkpoint {
    fn from(m: &DropoutSurrogate) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: m.architecture,
            dropout_rate: m.dropout_rate,
            input_mean: m.input_mean.to_vec(),
            input_scale: m.input_scale.to_vec(),
            output_mean: m.output_mean,
            output_scale: m.output_scale,
            layers: m
                .layers
                .iter()
                .map(|l| LayerDump {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl Checkpoint {
    fn into_surrogate(self) -> Result<DropoutSurrogate> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(LseError::invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.layers.len() != self.architecture.layers + 1 {
            return Err(LseError::invalid("checkpoint layer count mismatch"));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut fan_in = self.input_mean.len();
        for dump in self.layers {
            if dump.rows != fan_in || dump.bias.len() != dump.cols {
                return Err(LseError::invalid(
                    "checkpoint layer shapes are inconsistent",
                ));
            }
            let weights = Array2::from_shape_vec((dump.rows, dump.cols), dump.weights)
                .map_err(|e| LseError::invalid(e.to_string()))?;
            fan_in = dump.cols;
            layers.push(Dense {
                weights,
                bias: Array1::from(dump.bias),
            });
        }
        if self.input_scale.iter().any(|&s| s <= 0.0) || self.output_scale <= 0.0 {
            return Err(LseError::invalid(
                "checkpoint standardization scales must be positive",
            ));
        }
        Ok(DropoutSurrogate {
            architecture: self.architecture,
            layers,
            dropout_rate: self.dropout_rate,
            input_mean: Array1::from(self.input_mean),
            input_scale: Array1::from(self.input_scale),
            output_mean: self.output_mean,
            output_scale: self.output_scale,
            loss_history: Vec::new(),
        })
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(size: usize) -> Self {
        Self {
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, opts: &TrainingOptions) {
        self.t += 1;
        let bc1 = 1.0 - opts.beta1.powi(self.t);
        let bc2 = 1.0 - opts.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = opts.beta1 * self.m[i] + (1.0 - opts.beta1) * grad[i];
            self.v[i] = opts.beta2 * self.v[i] + (1.0 - opts.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + opts.epsilon);
        }
    }
}

/// Fits a fresh surrogate to the observations. Deterministic given `seed`.
pub fn train_bnn(
    data: &ObservationSet,
    pool: &CandidatePool,
    architecture: NetworkArchitecture,
    minor: MinorHyperparams,
    options: &TrainingOptions,
    seed: u64,
) -> Result<DropoutSurrogate> {
    let indices = data.indices();
    let targets = Array1::from(data.values());
    let x = pool.points().select(Axis(0), &indices);
    train_on_arrays(x.view(), targets.view(), architecture, minor, options, seed)
}

/// Same as [`train_bnn`] on raw feature rows and targets.
pub fn train_on_arrays(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    architecture: NetworkArchitecture,
    minor: MinorHyperparams,
    options: &TrainingOptions,
    seed: u64,
) -> Result<DropoutSurrogate> {
    let n = x.nrows();
    if n < 2 {
        return Err(LseError::InsufficientData { needed: 2, got: n });
    }
    if n != y.len() {
        return Err(LseError::invalid(
            "feature rows and targets differ in length",
        ));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(LseError::invalid("non-finite training data"));
    }
    let minor = MinorHyperparams::new(minor.learning_rate, minor.dropout_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model =
        DropoutSurrogate::init_with_rng(architecture, x.ncols(), minor.dropout_rate, &mut rng)?;

    let (mut in_mean, mut in_scale) = (Array1::zeros(x.ncols()), Array1::ones(x.ncols()));
    for (k, col) in x.columns().into_iter().enumerate() {
        let (m, s) = z_stats(col);
        in_mean[k] = m;
        in_scale[k] = s;
    }
    let (out_mean, out_scale) = z_stats(y);
    model.input_mean = in_mean;
    model.input_scale = in_scale;
    model.output_mean = out_mean;
    model.output_scale = out_scale;

    let xs = model.standardize_inputs(x);
    let ys = y.mapv(|v| (v - out_mean) / out_scale);

    let mut params = model.parameters();
    let mut adam = Adam::new(params.len());
    let mut best = f64::INFINITY;
    let mut last_improvement = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(options.epochs);

    for epoch in 0..options.epochs {
        let epoch_loss = if n <= options.full_batch_limit {
            let masks = model.sample_masks(n, &mut rng);
            let (loss, grad) = model.loss_and_gradient(xs.view(), ys.view(), &masks);
            if !loss.is_finite() {
                return Err(LseError::Divergence { epoch });
            }
            adam.step(&mut params, &grad.flatten(), minor.learning_rate, options);
            model.set_parameters(&params)?;
            loss
        } else {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(options.minibatch_size.max(1)) {
                let xb = xs.select(Axis(0), chunk);
                let yb = ys.select(Axis(0), chunk);
                let masks = model.sample_masks(chunk.len(), &mut rng);
                let (loss, grad) = model.loss_and_gradient(xb.view(), yb.view(), &masks);
                if !loss.is_finite() {
                    return Err(LseError::Divergence { epoch });
                }
                adam.step(&mut params, &grad.flatten(), minor.learning_rate, options);
                model.set_parameters(&params)?;
                total += loss * chunk.len() as f64;
            }
            total / n as f64
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(LseError::Divergence { epoch });
        }
        history.push(epoch_loss);
        // Dropout makes the per-epoch loss noisy; stop on the deterministic fit.
        let monitored = if minor.dropout_rate > 0.0 {
            let out = model.forward(xs.view(), None).output;
            (&out - &ys).mapv(|r| r * r).mean().unwrap_or(f64::INFINITY)
        } else {
            epoch_loss
        };
        if monitored < best - options.min_improvement {
            best = monitored;
            last_improvement = epoch;
        } else if epoch - last_improvement >= options.patience {
            break;
        }
    }
    model.loss_history = history;
    Ok(model)
}

/// `M` stochastic forward passes over the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEnsemble {
    passes: Array2<f64>,
    mean: Array1<f64>,
}

impl PredictionEnsemble {
    /// Wraps an `M x n` matrix of predictions.
    pub fn from_passes(passes: Array2<f64>) -> Result<Self> {
        if passes.nrows() == 0 || passes.ncols() == 0 {
            return Err(LseError::invalid(
                "ensemble needs at least one pass and one point",
            ));
        }
        if passes.iter().any(|v| !v.is_finite()) {
            return Err(LseError::invalid("non-finite prediction in ensemble"));
        }
        let mean = passes.mean_axis(Axis(0)).expect("non-empty");
        Ok(Self { passes, mean })
    }

    pub fn passes(&self) -> &Array2<f64> {
        &self.passes
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn num_passes(&self) -> usize {
        self.passes.nrows()
    }

    pub fn num_points(&self) -> usize {
        self.passes.ncols()
    }
}

pub fn mc_predict(
    model: &DropoutSurrogate,
    pool: &CandidatePool,
    passes: usize,
    seed: u64,
) -> Result<PredictionEnsemble> {
    if passes == 0 {
        return Err(LseError::invalid("need at least one forward pass"));
    }
    if pool.dim() != model.input_dim() {
        return Err(LseError::invalid(format!(
            "pool dimension {} does not match model input {}",
            pool.dim(),
            model.input_dim()
        )));
    }
    let standardized = model.standardize_inputs(pool.points().view());
    let rows: Vec<Array1<f64>> = (0..passes)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            model.stochastic_pass(standardized.view(), &mut rng)
        })
        .collect();
    let mut out = Array2::zeros((passes, pool.len()));
    for (j, row) in rows.into_iter().enumerate() {
        out.row_mut(j).assign(&row);
    }
    PredictionEnsemble::from_passes(out)
}

/// The surrogate's point prediction: column means of the ensemble.
pub fn mean_prediction(ensemble: &PredictionEnsemble) -> Array1<f64> {
    ensemble.mean.clone()
}
