//! One-dimensional convolutional network over fixed-length feature
//! sequences: time is the convolved axis and feature dimensions are
//! channels. Forward and backward passes, mini-batch gradient descent and a
//! finite-difference gradient check.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{DialectLabel, DialectPair};
use crate::error::{Error, Result};
use crate::featext::FeatureMatrix;

const FORMAT_TAG: &str = "dialect-id/cnn";
const FORMAT_VERSION: u32 = 1;
pub const INPUT_FRAMES: usize = 440;
pub const INPUT_CHANNELS: usize = 39;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

/// Architecture description used to build a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv1d { filters: usize, kernel: usize, activation: Activation },
    MaxPool1d { size: usize },
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize, activation: Activation },
}

/// Conv1d: `weights` is `filters x (kernel * in_channels)`, the inner index
/// running over kernel offset then channel. Dense: `weights` is
/// `units x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Input shape `(length, channels)`.
    pub input: (usize, usize),
    pub output: (usize, usize),
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn describe(&self) -> String {
        let act = |a: Activation| match a {
            Activation::Identity => "linear",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        };
        match self.spec {
            LayerSpec::Conv1d { filters, kernel, activation } => {
                format!("conv1d(filters={filters}, kernel={kernel}, {}, same)", act(activation))
            }
            LayerSpec::MaxPool1d { size } => format!("maxpool1d({size})"),
            LayerSpec::Dropout { rate } => format!("dropout({rate})"),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense { units, activation } => format!("dense({units}, {})", act(activation)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CnnFile", into = "CnnFile")]
pub struct CnnModel {
    input: (usize, usize),
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct CnnFile {
    format: String,
    version: u32,
    input_frames: usize,
    input_channels: usize,
    layers: Vec<Layer>,
}

impl From<CnnModel> for CnnFile {
    fn from(m: CnnModel) -> Self {
        CnnFile {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            input_frames: m.input.0,
            input_channels: m.input.1,
            layers: m.layers,
        }
    }
}

impl TryFrom<CnnFile> for CnnModel {
    type Error = Error;

    fn try_from(f: CnnFile) -> Result<Self> {
        if f.format != FORMAT_TAG || f.version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!("not a {FORMAT_TAG} v{FORMAT_VERSION} file")));
        }
        let specs: Vec<LayerSpec> = f.layers.iter().map(|l| l.spec).collect();
        let shapes = shape_chain((f.input_frames, f.input_channels), &specs)?;
        for (i, l) in f.layers.iter().enumerate() {
            let (w, b) = param_sizes(&l.spec, shapes[i]);
            if l.input != shapes[i] || l.output != shapes[i + 1] || l.weights.len() != w || l.bias.len() != b {
                return Err(Error::InvalidModel(format!("layer {i} has inconsistent shapes")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(CnnModel {
            input: (f.input_frames, f.input_channels),
            layers: f.layers,
        })
    }
}

fn shape_chain(input: (usize, usize), specs: &[LayerSpec]) -> Result<Vec<(usize, usize)>> {
    let mut shapes = vec![input];
    let mut cur = input;
    for (i, spec) in specs.iter().enumerate() {
        let bad = |m: &str| Error::ShapeMismatch {
            expected: m.to_string(),
            found: format!("layer {i} input {}x{}", cur.0, cur.1),
        };
        cur = match *spec {
            LayerSpec::Conv1d { filters, kernel, activation } => {
                if filters == 0 || kernel == 0 || activation == Activation::Softmax {
                    return Err(bad("conv1d with filters, kernel > 0 and no softmax"));
                }
                (cur.0, filters)
            }
            LayerSpec::MaxPool1d { size } => {
                if size == 0 || cur.0 < size {
                    return Err(bad("pool size between 1 and the input length"));
                }
                (cur.0 / size, cur.1)
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(bad("dropout rate in [0, 1)"));
                }
                cur
            }
            LayerSpec::Flatten => (1, cur.0 * cur.1),
            LayerSpec::Dense { units, .. } => {
                if cur.0 != 1 || units == 0 {
                    return Err(bad("flattened input for dense layer"));
                }
                (1, units)
            }
        };
        shapes.push(cur);
    }
    Ok(shapes)
}

fn param_sizes(spec: &LayerSpec, input: (usize, usize)) -> (usize, usize) {
    match *spec {
        LayerSpec::Conv1d { filters, kernel, .. } => (filters * kernel * input.1, filters),
        LayerSpec::Dense { units, .. } => (units * input.1, units),
        _ => (0, 0),
    }
}

impl CnnModel {
    /// Builds a model with He-normal weights and zero biases.
    pub fn new(input: (usize, usize), specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let shapes = shape_chain(input, specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (w, b) = param_sizes(spec, shapes[i]);
                let fan_in = match *spec {
                    LayerSpec::Conv1d { kernel, .. } => kernel * shapes[i].1,
                    _ => shapes[i].1,
                };
                let weights = if w > 0 {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..w).map(|_| normal.sample(&mut rng)).collect()
                } else {
                    Vec::new()
                };
                Layer {
                    spec: *spec,
                    input: shapes[i],
                    output: shapes[i + 1],
                    weights,
                    bias: vec![0.0; b],
                }
            })
            .collect();
        Ok(CnnModel { input, layers })
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Shapes from the input through every layer's output.
    pub fn shape_chain(&self) -> Vec<(usize, usize)> {
        std::iter::once(self.input).chain(self.layers.iter().map(|l| l.output)).collect()
    }

    fn check_input(&self, input: &FeatureMatrix) -> Result<()> {
        if (input.rows(), input.dim()) != self.input {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.input.0, self.input.1),
                found: format!("{}x{}", input.rows(), input.dim()),
            });
        }
        Ok(())
    }

    fn check_classifier(&self) -> Result<()> {
        match self.layers.last().map(|l| l.spec) {
            Some(LayerSpec::Dense { units: 2, activation: Activation::Softmax }) => Ok(()),
            _ => Err(Error::ShapeMismatch {
                expected: "final dense(2, softmax) layer".into(),
                found: self.layers.last().map_or("no layers".into(), Layer::describe),
            }),
        }
    }

    /// Output of the last layer. `rng` drives dropout and is only used when
    /// `train_mode` is set.
    pub fn forward_output(&self, input: &FeatureMatrix, train_mode: bool, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let trace = self.run(input.as_slice(), train_mode, rng);
        Ok(trace.activations.last().expect("output").clone())
    }

    /// Class probabilities `[LT, CT]`.
    pub fn forward(&self, input: &FeatureMatrix, train_mode: bool, rng: Option<&mut ChaCha8Rng>) -> Result<[f64; 2]> {
        self.check_classifier()?;
        let out = self.forward_output(input, train_mode, rng)?;
        Ok([out[0], out[1]])
    }

    fn run(&self, input: &[f64], train_mode: bool, mut rng: Option<&mut ChaCha8Rng>) -> Trace {
        let mut activations = vec![input.to_vec()];
        let mut aux = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = activations.last().expect("input");
            let (y, a) = match layer.spec {
                LayerSpec::Conv1d { filters, kernel, activation } => {
                    let (y, pre) = conv_forward(layer, x, filters, kernel, activation);
                    (y, Aux::Pre(pre))
                }
                LayerSpec::MaxPool1d { size } => {
                    let (y, arg) = pool_forward(layer, x, size);
                    (y, Aux::Argmax(arg))
                }
                LayerSpec::Dropout { rate } => match (&mut rng, train_mode && rate > 0.0) {
                    (Some(r), true) => {
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        (x.iter().zip(&mask).map(|(v, m)| v * m).collect(), Aux::Mask(mask))
                    }
                    _ => (x.clone(), Aux::None),
                },
                LayerSpec::Flatten => (x.clone(), Aux::None),
                LayerSpec::Dense { units, activation } => {
                    let (y, pre) = dense_forward(layer, x, units, activation);
                    (y, Aux::Pre(pre))
                }
            };
            activations.push(y);
            aux.push(a);
        }
        Trace { activations, aux }
    }

    /// Cross-entropy loss and parameter gradients for one sample.
    pub fn loss_and_gradients(&self, input: &FeatureMatrix, label: DialectLabel, train_mode: bool, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Gradients)> {
        self.check_classifier()?;
        self.check_input(input)?;
        let trace = self.run(input.as_slice(), train_mode, rng);
        let probs = trace.activations.last().expect("output");
        let y = label.index();
        let loss = -probs[y].max(f64::MIN_POSITIVE).ln();
        let mut grads = Gradients::zeros(self);
        // Softmax + cross-entropy: gradient w.r.t. the logits is p - onehot.
        let mut delta: Vec<f64> = probs.clone();
        delta[y] -= 1.0;
        let mut logits_grad = true;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.activations[i];
            delta = match (layer.spec, &trace.aux[i]) {
                (LayerSpec::Dense { activation, .. }, Aux::Pre(pre)) => {
                    let dz = if logits_grad {
                        delta
                    } else {
                        activation_backward(activation, pre, &delta)
                    };
                    dense_backward(layer, x, &dz, &mut grads.layers[i])
                }
                (LayerSpec::Conv1d { kernel, activation, .. }, Aux::Pre(pre)) => {
                    let dz = activation_backward(activation, pre, &delta);
                    conv_backward(layer, x, &dz, kernel, &mut grads.layers[i])
                }
                (LayerSpec::MaxPool1d { .. }, Aux::Argmax(arg)) => {
                    let mut dx = vec![0.0; x.len()];
                    for (d, &j) in delta.iter().zip(arg) {
                        dx[j] += d;
                    }
                    dx
                }
                (LayerSpec::Dropout { .. }, Aux::Mask(mask)) => delta.iter().zip(mask).map(|(d, m)| d * m).collect(),
                _ => delta,
            };
            logits_grad = false;
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, input: &FeatureMatrix, label: DialectLabel) -> Result<f64> {
        let p = self.forward(input, false, None)?;
        Ok(-p[label.index()].max(f64::MIN_POSITIVE).ln())
    }

    /// Activation pattern (ReLU signs and pooling winners) of an inference
    /// pass; equal signatures mean the loss is smooth between two points.
    fn signature(&self, input: &[f64]) -> Vec<u32> {
        let trace = self.run(input, false, None);
        let mut sig = Vec::new();
        for (layer, aux) in self.layers.iter().zip(&trace.aux) {
            match (layer.spec, aux) {
                (LayerSpec::Conv1d { activation: Activation::Relu, .. }, Aux::Pre(pre))
                | (LayerSpec::Dense { activation: Activation::Relu, .. }, Aux::Pre(pre)) => {
                    sig.extend(pre.iter().map(|&z| u32::from(z > 0.0)))
                }
                (_, Aux::Argmax(arg)) => sig.extend(arg.iter().map(|&j| j as u32)),
                _ => {}
            }
        }
        sig
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, scale: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= scale * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= scale * d;
            }
        }
    }

    fn param_mut(&mut self, id: ParamId) -> &mut f64 {
        let l = &mut self.layers[id.layer];
        if id.bias {
            &mut l.bias[id.index]
        } else {
            &mut l.weights[id.index]
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("CNN serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// The fixed architecture: two blocks of (conv, conv, pool, dropout) with 32
/// filters of width 10 then 64 of width 5, a 1024-unit rectifier layer and
/// a two-way softmax.
pub fn reference_layer_specs() -> Vec<LayerSpec> {
    use Activation::*;
    vec![
        LayerSpec::Conv1d { filters: 32, kernel: 10, activation: Relu },
        LayerSpec::Conv1d { filters: 32, kernel: 10, activation: Relu },
        LayerSpec::MaxPool1d { size: 2 },
        LayerSpec::Dropout { rate: 0.25 },
        LayerSpec::Conv1d { filters: 64, kernel: 5, activation: Relu },
        LayerSpec::Conv1d { filters: 64, kernel: 5, activation: Relu },
        LayerSpec::MaxPool1d { size: 2 },
        LayerSpec::Dropout { rate: 0.25 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 1024, activation: Relu },
        LayerSpec::Dense { units: 2, activation: Softmax },
    ]
}

/// The standard network for 440 x 39 inputs.
pub fn build_reference_cnn() -> CnnModel {
    build_reference_cnn_for(INPUT_FRAMES, INPUT_CHANNELS, 0).expect("reference architecture is valid")
}

/// The standard architecture for another input size or initialization seed.
pub fn build_reference_cnn_for(frames: usize, channels: usize, seed: u64) -> Result<CnnModel> {
    CnnModel::new((frames, channels), &reference_layer_specs(), seed)
}

struct Trace {
    activations: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

enum Aux {
    None,
    Pre(Vec<f64>),
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
}

fn activate(a: Activation, z: &[f64]) -> Vec<f64> {
    match a {
        Activation::Identity => z.to_vec(),
        Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Softmax => {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
    }
}

fn activation_backward(a: Activation, pre: &[f64], dy: &[f64]) -> Vec<f64> {
    match a {
        Activation::Identity => dy.to_vec(),
        Activation::Relu => pre.iter().zip(dy).map(|(&z, &d)| if z > 0.0 { d } else { 0.0 }).collect(),
        Activation::Softmax => {
            let y = activate(Activation::Softmax, pre);
            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
            y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)).collect()
        }
    }
}

/// Input zero-padded so the output keeps the input length: `(k-1)/2` rows
/// in front, the rest behind.
fn pad_input(x: &[f64], len: usize, ch: usize, kernel: usize) -> Vec<f64> {
    let left = (kernel - 1) / 2;
    let mut padded = vec![0.0; (len + kernel - 1) * ch];
    padded[left * ch..(left + len) * ch].copy_from_slice(x);
    padded
}

fn conv_forward(layer: &Layer, x: &[f64], filters: usize, kernel: usize, act: Activation) -> (Vec<f64>, Vec<f64>) {
    let (len, ch) = layer.input;
    let padded = pad_input(x, len, ch, kernel);
    let span = kernel * ch;
    let mut pre = vec![0.0; len * filters];
    for t in 0..len {
        let window = &padded[t * ch..t * ch + span];
        for f in 0..filters {
            let w = &layer.weights[f * span..(f + 1) * span];
            pre[t * filters + f] = layer.bias[f] + dot(w, window);
        }
    }
    (activate(act, &pre), pre)
}

fn conv_backward(layer: &Layer, x: &[f64], dz: &[f64], kernel: usize, g: &mut LayerGrad) -> Vec<f64> {
    let (len, ch) = layer.input;
    let filters = layer.output.1;
    let padded = pad_input(x, len, ch, kernel);
    let span = kernel * ch;
    let mut dpad = vec![0.0; padded.len()];
    for t in 0..len {
        let window = &padded[t * ch..t * ch + span];
        let dwin = &mut dpad[t * ch..t * ch + span];
        for f in 0..filters {
            let d = dz[t * filters + f];
            if d == 0.0 {
                continue;
            }
            g.bias[f] += d;
            let gw = &mut g.weights[f * span..(f + 1) * span];
            let w = &layer.weights[f * span..(f + 1) * span];
            for k in 0..span {
                gw[k] += d * window[k];
                dwin[k] += d * w[k];
            }
        }
    }
    let left = (kernel - 1) / 2;
    dpad[left * ch..(left + len) * ch].to_vec()
}

fn pool_forward(layer: &Layer, x: &[f64], size: usize) -> (Vec<f64>, Vec<usize>) {
    let (_, ch) = layer.input;
    let out_len = layer.output.0;
    let mut y = vec![0.0; out_len * ch];
    let mut arg = vec![0usize; out_len * ch];
    for t in 0..out_len {
        for c in 0..ch {
            let mut best = t * size * ch + c;
            for k in 1..size {
                let j = (t * size + k) * ch + c;
                if x[j] > x[best] {
                    best = j;
                }
            }
            y[t * ch + c] = x[best];
            arg[t * ch + c] = best;
        }
    }
    (y, arg)
}

fn dense_forward(layer: &Layer, x: &[f64], units: usize, act: Activation) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let pre: Vec<f64> = (0..units)
        .map(|u| layer.bias[u] + dot(&layer.weights[u * n..(u + 1) * n], x))
        .collect();
    (activate(act, &pre), pre)
}

fn dense_backward(layer: &Layer, x: &[f64], dz: &[f64], g: &mut LayerGrad) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (u, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g.bias[u] += d;
        let w = &layer.weights[u * n..(u + 1) * n];
        let gw = &mut g.weights[u * n..(u + 1) * n];
        for i in 0..n {
            gw[i] += d * x[i];
            dx[i] += d * w[i];
        }
    }
    dx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros(model: &CnnModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    fn get(&self, id: ParamId) -> f64 {
        let l = &self.layers[id.layer];
        if id.bias {
            l.bias[id.index]
        } else {
            l.weights[id.index]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ParamId {
    layer: usize,
    bias: bool,
    index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        CnnTrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CnnTrainReport {
    pub model: CnnModel,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch gradient descent on cross-entropy. Deterministic for a given
/// seed: the shuffle and dropout streams both derive from it.
pub fn train(model: &CnnModel, dataset: &[(FeatureMatrix, DialectLabel)], cfg: &CnnTrainConfig) -> Result<CnnTrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("CNN training set"));
    }
    for d in DialectLabel::ALL {
        if !dataset.iter().any(|(_, l)| *l == d) {
            return Err(Error::InvalidConfig(format!("CNN training set has no {d} samples")));
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut model = model.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = Gradients::zeros(&model);
            for &i in batch {
                let (feat, label) = &dataset[i];
                let (loss, g) = model.loss_and_gradients(feat, *label, true, Some(&mut dropout_rng))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, batch {b}")));
                }
                total += loss;
                acc.add(&g);
            }
            model.apply_gradients(&acc, cfg.learning_rate / batch.len() as f64);
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("non-finite mean loss at epoch {epoch}")));
        }
        log::debug!("cnn epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(CnnTrainReport { model, epoch_losses })
}

/// Decision from the softmax outputs; ties go to LT.
pub fn cnn_identify(model: &CnnModel, input: &FeatureMatrix) -> Result<(DialectLabel, DialectPair<f64>)> {
    let p = model.forward(input, false, None)?;
    let scores = DialectPair::new(p[0], p[1]);
    Ok((crate::gmm::argmax_lt_ties(&scores), scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameters compared, per layer index.
    pub checked_per_layer: Vec<usize>,
    /// Draws rejected because the perturbation crossed a ReLU or pooling kink.
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.checked_per_layer.iter().sum()
    }
}

/// Compares backpropagated gradients with central differences on about
/// `num_params` parameters spread evenly over the parameterized layers.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. Dropout is off.
pub fn gradient_check(model: &CnnModel, input: &FeatureMatrix, label: DialectLabel, epsilon: f64, num_params: usize, seed: u64) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_gradients(input, label, false, None)?;
    let base_sig = model.signature(input.as_slice());
    let param_layers: Vec<usize> = (0..model.layers.len()).filter(|&i| model.layers[i].num_params() > 0).collect();
    if param_layers.is_empty() {
        return Err(Error::EmptyInput("trainable parameters"));
    }
    let per_layer = num_params.div_ceil(param_layers.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked_per_layer: vec![0; model.layers.len()],
        kinks_skipped: 0,
    };
    for &li in &param_layers {
        let layer = &model.layers[li];
        let mut attempts = 0;
        let target = per_layer.min(layer.num_params());
        while report.checked_per_layer[li] < target {
            attempts += 1;
            if attempts > 20 * target + 100 {
                return Err(Error::InvalidConfig(format!(
                    "gradient check could not find smooth parameters in layer {li}"
                )));
            }
            // Draw biases in proportion to their share of the layer, but at least one.
            let bias = report.checked_per_layer[li] == 0 || rng.random_range(0..layer.num_params()) < layer.bias.len();
            let index = if bias {
                rng.random_range(0..layer.bias.len())
            } else {
                rng.random_range(0..layer.weights.len())
            };
            let id = ParamId { layer: li, bias, index };
            let orig = *work.param_mut(id);
            *work.param_mut(id) = orig + epsilon;
            let sig_plus = work.signature(input.as_slice());
            let plus = work.loss(input, label)?;
            *work.param_mut(id) = orig - epsilon;
            let sig_minus = work.signature(input.as_slice());
            let minus = work.loss(input, label)?;
            *work.param_mut(id) = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.get(id);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked_per_layer[li] += 1;
        }
    }
    Ok(report)
}
