//! A small convolutional classifier with backpropagation and SGD training,
//! its binary model container, and a non-learned baseline classifier.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::DefectClass;
use crate::unwrap::{GrayTile, ImageMeta};

pub const MODEL_MAGIC: &[u8; 4] = b"TNN1";
pub const MODEL_VERSION: u8 = 1;
pub const CLEAN_LABEL: &str = "clean";
pub const NOT_CLEAN_LABEL: &str = "not_clean";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} is outside the {classes} model classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file version {found}, expected {expected}")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn mismatch(expected: impl ToString, got: impl ToString) -> NnError {
    NnError::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 3×3 convolution, zero "same" padding; weights laid out `[out][in][ky][kx]`.
    Conv3x3 {
        in_c: usize,
        out_c: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    /// Fully connected layer over the flattened `[c][h][w]` input; weights `[out][in]`.
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Softmax,
}

impl Layer {
    fn out_shape(&self, s: Shape) -> Result<Shape, NnError> {
        match self {
            Layer::Conv3x3 { in_c, out_c, weights, bias } => {
                if s.c != *in_c {
                    return Err(mismatch(format!("{in_c} input channels"), s));
                }
                if weights.len() != out_c * in_c * 9 || bias.len() != *out_c {
                    return Err(mismatch("conv parameter count", weights.len()));
                }
                Ok(Shape { c: *out_c, ..s })
            }
            Layer::Relu | Layer::Softmax => Ok(s),
            Layer::MaxPool2 => {
                if s.h < 2 || s.w < 2 {
                    return Err(mismatch("pooling input of at least 2x2", s));
                }
                Ok(Shape { c: s.c, h: s.h / 2, w: s.w / 2 })
            }
            Layer::Dense { inputs, outputs, weights, bias } => {
                if s.len() != *inputs {
                    return Err(mismatch(format!("{inputs} dense inputs"), s));
                }
                if weights.len() != inputs * outputs || bias.len() != *outputs {
                    return Err(mismatch("dense parameter count", weights.len()));
                }
                Ok(Shape { c: *outputs, h: 1, w: 1 })
            }
        }
    }

    fn params(&self) -> Option<(&Vec<f64>, &Vec<f64>)> {
        match self {
            Layer::Conv3x3 { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv3x3 { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }
}

/// Channel widths of the two convolution blocks and the hidden dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub conv: [usize; 2],
    pub dense: usize,
}

/// Phase-one screening network.
pub const ARCH_A: ArchSpec = ArchSpec { conv: [8, 16], dense: 32 };
/// Phase-two confirmation network.
pub const ARCH_B: ArchSpec = ArchSpec { conv: [16, 32], dense: 64 };

pub fn binary_labels() -> Vec<String> {
    vec![CLEAN_LABEL.to_string(), NOT_CLEAN_LABEL.to_string()]
}

pub fn full_labels() -> Vec<String> {
    std::iter::once(CLEAN_LABEL.to_string())
        .chain(DefectClass::ALL.iter().map(|c| c.name().to_string()))
        .collect()
}

/// Label set a classifier is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taxonomy {
    /// `clean` / `not_clean`.
    #[default]
    Binary,
    /// `clean` plus one label per defect class.
    Full,
}

impl Taxonomy {
    pub fn labels(self) -> Vec<String> {
        match self {
            Taxonomy::Binary => binary_labels(),
            Taxonomy::Full => full_labels(),
        }
    }

    /// Class index for a tile holding `defect`, or the clean index.
    pub fn label_of(self, defect: Option<DefectClass>) -> usize {
        match (self, defect) {
            (_, None) => 0,
            (Taxonomy::Binary, Some(_)) => 1,
            (Taxonomy::Full, Some(c)) => 1 + DefectClass::ALL.iter().position(|&k| k == c).expect("known class"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub input_size: usize,
    pub layers: Vec<Layer>,
    pub class_labels: Vec<String>,
    pub seed: u64,
    shapes: Vec<Shape>,
}

/// Gradients in parameter order: for each parameterized layer, weights then bias.
pub type Gradients = Vec<Vec<f64>>;

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// Flat input index of each pooled maximum, per layer (empty elsewhere).
    argmax: Vec<Vec<u32>>,
}

impl Trace {
    pub fn probabilities(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Hash of every ReLU sign pattern and pooling choice; equal signatures
    /// mean the network is in the same linear piece.
    pub fn signature(&self, model: &ClassifierModel) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, layer) in model.layers.iter().enumerate() {
            match layer {
                Layer::Relu => {
                    for chunk in self.acts[i + 1].chunks(64) {
                        let bits = chunk.iter().enumerate().fold(0u64, |b, (k, v)| b | ((*v > 0.0) as u64) << k);
                        h.write_u64(bits);
                    }
                }
                Layer::MaxPool2 => self.argmax[i].iter().for_each(|&a| h.write_u32(a)),
                _ => {}
            }
        }
        h.finish()
    }
}

impl ClassifierModel {
    /// Builds a model from explicit layers, checking that shapes chain from a
    /// `input_size × input_size × 1` tile to one probability per label.
    pub fn from_layers(input_size: usize, layers: Vec<Layer>, class_labels: Vec<String>, seed: u64) -> Result<Self, NnError> {
        let mut s = Shape { c: 1, h: input_size, w: input_size };
        let mut shapes = vec![s];
        for layer in &layers {
            s = layer.out_shape(s)?;
            shapes.push(s);
        }
        if !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(mismatch("softmax output layer", "other"));
        }
        if layers[..layers.len() - 1].iter().any(|l| matches!(l, Layer::Softmax)) {
            return Err(mismatch("a single final softmax", "softmax in hidden layers"));
        }
        if s.len() != class_labels.len() || s.h != 1 || s.w != 1 {
            return Err(mismatch(format!("{} class outputs", class_labels.len()), s));
        }
        let weights_finite = layers
            .iter()
            .filter_map(Layer::params)
            .all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()));
        if !weights_finite {
            return Err(mismatch("finite weights", "non-finite value"));
        }
        Ok(Self {
            input_size,
            layers,
            class_labels,
            seed,
            shapes,
        })
    }

    /// conv → ReLU → pool → conv → ReLU → pool → dense → ReLU → dense → softmax,
    /// He-normal initialized from `seed`.
    pub fn with_arch(arch: ArchSpec, input_size: usize, class_labels: Vec<String>, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |fan_in: usize, n: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let [c1, c2] = arch.conv;
        let flat = c2 * (input_size / 2 / 2) * (input_size / 2 / 2);
        let classes = class_labels.len();
        let layers = vec![
            Layer::Conv3x3 { in_c: 1, out_c: c1, weights: he(9, c1 * 9), bias: vec![0.0; c1] },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv3x3 { in_c: c1, out_c: c2, weights: he(c1 * 9, c2 * c1 * 9), bias: vec![0.0; c2] },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Dense { inputs: flat, outputs: arch.dense, weights: he(flat, flat * arch.dense), bias: vec![0.0; arch.dense] },
            Layer::Relu,
            Layer::Dense { inputs: arch.dense, outputs: classes, weights: he(arch.dense, arch.dense * classes), bias: vec![0.0; classes] },
            Layer::Softmax,
        ];
        Self::from_layers(input_size, layers, class_labels, seed)
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Parameter arrays in declared order (weights then bias per layer).
    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().filter_map(Layer::params).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().filter_map(Layer::params_mut).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn check_input(&self, len: usize) -> Result<(), NnError> {
        let want = self.input_size * self.input_size;
        if len != want {
            return Err(mismatch(format!("{}x{} input", self.input_size, self.input_size), format!("{len} values")));
        }
        Ok(())
    }

    /// Runs the network on a normalized input, recording activations.
    pub fn forward_trace(&self, input: &[f64], tr: &mut Trace) -> Result<(), NnError> {
        self.check_input(input.len())?;
        tr.acts.resize_with(self.layers.len() + 1, Vec::new);
        tr.argmax.resize_with(self.layers.len(), Vec::new);
        tr.acts[0].clear();
        tr.acts[0].extend_from_slice(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = tr.acts.split_at_mut(i + 1);
            let x = &done[i];
            let y = &mut rest[0];
            let s = self.shapes[i];
            y.clear();
            y.resize(self.shapes[i + 1].len(), 0.0);
            match layer {
                Layer::Conv3x3 { in_c, out_c, weights, bias } => conv_forward(x, y, s, *in_c, *out_c, weights, bias),
                Layer::Relu => y.iter_mut().zip(x).for_each(|(o, v)| *o = v.max(0.0)),
                Layer::MaxPool2 => pool_forward(x, y, s, &mut tr.argmax[i]),
                Layer::Dense { inputs, weights, bias, .. } => {
                    for (o, (row, b)) in y.iter_mut().zip(weights.chunks_exact(*inputs).zip(bias)) {
                        *o = dot(row, x) + b;
                    }
                }
                Layer::Softmax => softmax(x, y),
            }
        }
        Ok(())
    }

    /// Class probabilities for a normalized input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut tr = Trace::default();
        self.forward_trace(input, &mut tr)?;
        Ok(tr.probabilities().to_vec())
    }

    /// Class probabilities for a gray tile (see [`normalize`]).
    pub fn forward_tile(&self, tile: &GrayTile) -> Result<Vec<f64>, NnError> {
        if tile.size != self.input_size {
            return Err(mismatch(format!("{} pixel tile", self.input_size), format!("{} pixel tile", tile.size)));
        }
        self.forward(&normalize(&tile.pixels))
    }

    /// Backpropagates the cross-entropy loss of `label` through a recorded
    /// trace, adding `scale ×` the gradient into `grads`. Returns the loss.
    pub fn backward(&self, tr: &Trace, label: usize, scale: f64, grads: &mut Gradients) -> f64 {
        let probs = tr.probabilities();
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        // softmax and cross-entropy combine to p − onehot at the logits
        let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        d[label] -= scale;
        let mut slot = grads.len();
        let mut next = Vec::new();
        for i in (0..self.layers.len() - 1).rev() {
            let x = &tr.acts[i];
            let s = self.shapes[i];
            let need_input_grad = i > 0;
            match &self.layers[i] {
                Layer::Conv3x3 { in_c, out_c, weights, .. } => {
                    slot -= 2;
                    let (gw, gb) = grads[slot..slot + 2].split_at_mut(1);
                    next.clear();
                    if need_input_grad {
                        next.resize(x.len(), 0.0);
                    }
                    conv_backward(x, &d, &mut next, s, *in_c, *out_c, weights, &mut gw[0], &mut gb[0], need_input_grad);
                }
                Layer::Relu => {
                    next.clear();
                    next.extend(d.iter().zip(&tr.acts[i + 1]).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }));
                }
                Layer::MaxPool2 => {
                    next.clear();
                    next.resize(x.len(), 0.0);
                    for (g, &a) in d.iter().zip(&tr.argmax[i]) {
                        next[a as usize] += g;
                    }
                }
                Layer::Dense { inputs, weights, .. } => {
                    slot -= 2;
                    let (gw, gb) = grads[slot..slot + 2].split_at_mut(1);
                    next.clear();
                    if need_input_grad {
                        next.resize(*inputs, 0.0);
                    }
                    for (o, &g) in d.iter().enumerate() {
                        gb[0][o] += g;
                        if g == 0.0 {
                            continue;
                        }
                        axpy(g, x, &mut gw[0][o * inputs..(o + 1) * inputs]);
                        if need_input_grad {
                            axpy(g, &weights[o * inputs..(o + 1) * inputs], &mut next);
                        }
                    }
                }
                Layer::Softmax => unreachable!("softmax is only the final layer"),
            }
            std::mem::swap(&mut d, &mut next);
        }
        loss
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize, NnError> {
        Ok(argmax(&self.forward(input)?))
    }
}

/// Network input for a gray tile: levels scaled to unit range and centered
/// on mid-gray, so flat tiles sit near zero.
pub fn normalize(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| gray_input(p)).collect()
}

fn gray_input(p: u8) -> f64 {
    p as f64 / 255.0 - 0.5
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Valid output column range and input offset for a horizontal tap offset.
fn tap_span(w: usize, dx: isize) -> (usize, usize) {
    match dx {
        -1 => (1, w),
        1 => (0, w - 1),
        _ => (0, w),
    }
}

fn conv_forward(x: &[f64], y: &mut [f64], s: Shape, in_c: usize, out_c: usize, weights: &[f64], bias: &[f64]) {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    for co in 0..out_c {
        let out = &mut y[co * plane..(co + 1) * plane];
        out.fill(bias[co]);
        for ci in 0..in_c {
            let inp = &x[ci * plane..(ci + 1) * plane];
            let k = &weights[(co * in_c + ci) * 9..(co * in_c + ci + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let rows = (dy.max(0) as usize)..((h as isize + dy.min(0)) as usize);
                for kx in 0..3 {
                    let wk = k[ky * 3 + kx];
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_span(w, dx);
                    for sy in rows.clone() {
                        let oy = (sy as isize - dy) as usize;
                        let src = &inp[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                        axpy(wk, src, &mut out[oy * w + x0..oy * w + x1]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    d: &[f64],
    dx_out: &mut [f64],
    s: Shape,
    in_c: usize,
    out_c: usize,
    weights: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    for co in 0..out_c {
        let g = &d[co * plane..(co + 1) * plane];
        gb[co] += g.iter().sum::<f64>();
        for ci in 0..in_c {
            let inp = &x[ci * plane..(ci + 1) * plane];
            let base = (co * in_c + ci) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let rows = (dy.max(0) as usize)..((h as isize + dy.min(0)) as usize);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_span(w, dx);
                    let wk = weights[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for sy in rows.clone() {
                        let oy = (sy as isize - dy) as usize;
                        let src = sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize;
                        let grow = &g[oy * w + x0..oy * w + x1];
                        acc += dot(grow, &inp[src.clone()]);
                        if need_input_grad {
                            axpy(wk, grow, &mut dx_out[ci * plane..(ci + 1) * plane][src]);
                        }
                    }
                    gw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

fn pool_forward(x: &[f64], y: &mut [f64], s: Shape, argmax: &mut Vec<u32>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    argmax.clear();
    argmax.reserve(s.c * oh * ow);
    for c in 0..s.c {
        let base = c * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * s.w + 2 * ox;
                let mut best = i0;
                for i in [i0 + 1, i0 + s.w, i0 + s.w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y[(c * oh + oy) * ow + ox] = x[best];
                argmax.push(best as u32);
            }
        }
    }
}

fn softmax(x: &[f64], y: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in y.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    y.iter_mut().for_each(|o| *o /= sum);
}

/// A gray tile with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<u8>,
    pub label: usize,
}

/// Mean cross-entropy loss of a batch.
pub fn loss(model: &ClassifierModel, batch: &[(Vec<f64>, usize)]) -> Result<f64, NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut tr = Trace::default();
    let mut total = 0.0;
    for (x, label) in batch {
        check_label(model, *label)?;
        model.forward_trace(x, &mut tr)?;
        total += -tr.probabilities()[*label].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / batch.len() as f64)
}

fn check_label(model: &ClassifierModel, label: usize) -> Result<(), NnError> {
    if label >= model.num_classes() {
        return Err(NnError::InvalidLabel {
            label,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

/// Exact gradient of the mean cross-entropy loss over a batch, with the loss.
pub fn gradient(model: &ClassifierModel, batch: &[(Vec<f64>, usize)]) -> Result<(Gradients, f64), NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut grads = model.zero_gradients();
    let mut tr = Trace::default();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (x, label) in batch {
        check_label(model, *label)?;
        model.forward_trace(x, &mut tr)?;
        total += model.backward(&tr, *label, scale, &mut grads);
    }
    Ok((grads, total * scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once training accuracy reaches this fraction.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss over each epoch's minibatch updates.
    pub loss_history: Vec<f64>,
    /// Training accuracy after each epoch.
    pub accuracy_history: Vec<f64>,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.loss_history.len()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.accuracy_history.last().copied().unwrap_or(0.0)
    }
}

/// Fraction of samples whose argmax class equals the label.
pub fn accuracy(model: &ClassifierModel, data: &[Sample]) -> Result<f64, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut tr = Trace::default();
    let mut right = 0usize;
    for s in data {
        model.forward_trace(&normalize(&s.pixels), &mut tr)?;
        right += (argmax(tr.probabilities()) == s.label) as usize;
    }
    Ok(right as f64 / data.len() as f64)
}

/// Minibatch SGD with momentum; shuffling is seeded from `cfg.seed`.
pub fn train(model: &mut ClassifierModel, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(NnError::InvalidConfig(format!(
            "learning_rate {} batch_size {} momentum {}",
            cfg.learning_rate, cfg.batch_size, cfg.momentum
        )));
    }
    for s in data {
        check_label(model, s.label)?;
        model.check_input(s.pixels.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = model.zero_gradients();
    let mut grads = model.zero_gradients();
    let mut tr = Trace::default();
    let mut input = Vec::new();
    let mut report = TrainReport {
        loss_history: Vec::new(),
        accuracy_history: Vec::new(),
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                input.clear();
                input.extend(data[k].pixels.iter().map(|&p| gray_input(p)));
                model.forward_trace(&input, &mut tr)?;
                epoch_loss += model.backward(&tr, data[k].label, scale, &mut grads) / data.len() as f64;
            }
            for ((p, v), g) in model.params_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                    *p += *v;
                }
            }
        }
        report.loss_history.push(epoch_loss);
        let acc = accuracy(model, data)?;
        report.accuracy_history.push(acc);
        log::debug!("epoch {} loss {:.5} accuracy {:.4}", report.loss_history.len(), epoch_loss, acc);
        if cfg.target_accuracy.is_some_and(|t| acc >= t) {
            break;
        }
    }
    Ok(report)
}

/// Result of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose ±h step kept crossing a ReLU or pooling kink.
    pub skipped: usize,
}

/// Checks up to `max_params` randomly chosen parameters (all of them when
/// the model is smaller) with step `h`. A parameter whose ±h step changes the
/// activation pattern is retried after jittering the inputs by up to 1e-4.
pub fn gradient_check(model: &ClassifierModel, batch: &[(Vec<f64>, usize)], h: f64, max_params: usize, seed: u64) -> Result<GradCheck, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut all: Vec<(usize, usize)> = sizes.iter().enumerate().flat_map(|(s, &n)| (0..n).map(move |i| (s, i))).collect();
    if all.len() > max_params {
        all.shuffle(&mut rng);
        all.truncate(max_params);
        all.sort_unstable();
    }
    let signatures = |m: &ClassifierModel, b: &[(Vec<f64>, usize)]| -> Result<Vec<u64>, NnError> {
        let mut tr = Trace::default();
        b.iter()
            .map(|(x, _)| {
                m.forward_trace(x, &mut tr)?;
                Ok(tr.signature(m))
            })
            .collect()
    };
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = model.clone();
    let mut inputs = batch.to_vec();
    let (mut analytic, _) = gradient(model, &inputs)?;
    let mut base_sig = signatures(model, &inputs)?;
    for (slot, idx) in all {
        let mut attempts = 0;
        loop {
            let orig = work.params()[slot][idx];
            work.params_mut()[slot][idx] = orig + h;
            let (plus, sig_plus) = (loss(&work, &inputs)?, signatures(&work, &inputs)?);
            work.params_mut()[slot][idx] = orig - h;
            let (minus, sig_minus) = (loss(&work, &inputs)?, signatures(&work, &inputs)?);
            work.params_mut()[slot][idx] = orig;
            if sig_plus == base_sig && sig_minus == base_sig {
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[slot][idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                result.max_rel_error = result.max_rel_error.max(rel);
                result.checked += 1;
                break;
            }
            attempts += 1;
            if attempts > 8 {
                result.skipped += 1;
                break;
            }
            for (x, _) in inputs.iter_mut() {
                x.iter_mut().for_each(|v| *v += rng.random_range(-1e-4..1e-4));
            }
            analytic = gradient(model, &inputs)?.0;
            base_sig = signatures(model, &inputs)?;
        }
    }
    Ok(result)
}

/// One of the eight symmetries of the square applied to a `size × size`
/// tile: `k & 3` quarter turns, then a horizontal flip when `k & 4` is set.
pub fn dihedral(pixels: &[u8], size: usize, k: u8) -> Vec<u8> {
    let mut out = vec![0u8; pixels.len()];
    for r in 0..size {
        for c in 0..size {
            let (mut rr, mut cc) = (r, c);
            for _ in 0..(k & 3) {
                (rr, cc) = (cc, size - 1 - rr);
            }
            if k & 4 != 0 {
                cc = size - 1 - cc;
            }
            out[rr * size + cc] = pixels[r * size + c];
        }
    }
    out
}

/// Adds the seven non-identity dihedral copies of every sample.
pub fn augment_dihedral(data: &[Sample], size: usize) -> Vec<Sample> {
    data.iter()
        .flat_map(|s| {
            (0..8u8).map(move |k| Sample {
                pixels: dihedral(&s.pixels, size, k),
                label: s.label,
            })
        })
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes a model: magic, version, architecture descriptor, weights as
/// little-endian f64 in parameter order, CRC-32 trailer over everything before it.
pub fn model_to_bytes(model: &ClassifierModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.num_params() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    put_u32(&mut out, model.input_size);
    out.extend_from_slice(&model.seed.to_le_bytes());
    put_u32(&mut out, model.class_labels.len());
    for label in &model.class_labels {
        out.extend_from_slice(&(label.len() as u16).to_le_bytes());
        out.extend_from_slice(label.as_bytes());
    }
    put_u32(&mut out, model.layers.len());
    for layer in &model.layers {
        match layer {
            Layer::Conv3x3 { in_c, out_c, .. } => {
                out.push(1);
                put_u32(&mut out, *in_c);
                put_u32(&mut out, *out_c);
            }
            Layer::Relu => out.push(2),
            Layer::MaxPool2 => out.push(3),
            Layer::Dense { inputs, outputs, .. } => {
                out.push(4);
                put_u32(&mut out, *inputs);
                put_u32(&mut out, *outputs);
            }
            Layer::Softmax => out.push(5),
        }
    }
    for p in model.params() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| NnError::CorruptFile("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| NnError::CorruptFile("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ClassifierModel, NnError> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(NnError::BadMagic);
    }
    if bytes.len() < 9 {
        return Err(NnError::CorruptFile("file too short".into()));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(NnError::VersionMismatch {
            found: bytes[4],
            expected: MODEL_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(NnError::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 5 };
    let input_size = r.u32()?;
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let n_labels = r.u32()?;
    let mut labels = Vec::with_capacity(n_labels.min(1024));
    for _ in 0..n_labels {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let s = std::str::from_utf8(r.take(len)?).map_err(|_| NnError::CorruptFile("label is not UTF-8".into()))?;
        labels.push(s.to_string());
    }
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        layers.push(match r.u8()? {
            1 => {
                let (in_c, out_c) = (r.u32()?, r.u32()?);
                Layer::Conv3x3 { in_c, out_c, weights: Vec::new(), bias: Vec::new() }
            }
            2 => Layer::Relu,
            3 => Layer::MaxPool2,
            4 => {
                let (inputs, outputs) = (r.u32()?, r.u32()?);
                Layer::Dense { inputs, outputs, weights: Vec::new(), bias: Vec::new() }
            }
            5 => Layer::Softmax,
            t => return Err(NnError::CorruptFile(format!("unknown layer tag {t}"))),
        });
    }
    for layer in &mut layers {
        match layer {
            Layer::Conv3x3 { in_c, out_c, weights, bias } => {
                *weights = r.f64s(*in_c * *out_c * 9)?;
                *bias = r.f64s(*out_c)?;
            }
            Layer::Dense { inputs, outputs, weights, bias } => {
                *weights = r.f64s(*inputs * *outputs)?;
                *bias = r.f64s(*outputs)?;
            }
            _ => {}
        }
    }
    if r.pos != body.len() {
        return Err(NnError::CorruptFile("trailing bytes after weights".into()));
    }
    ClassifierModel::from_layers(input_size, layers, labels, seed).map_err(|e| NnError::CorruptFile(e.to_string()))
}

/// Writes the model next to `path` and renames it into place.
pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<(), NnError> {
    let tmp = path.with_extension("tnn1.partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&model_to_bytes(model))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ClassifierModel, NnError> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Anything that maps a gray tile to class probabilities.
pub trait TileClassifier: Sync {
    fn class_labels(&self) -> &[String];
    /// Required tile edge, if the classifier is size-specific.
    fn input_size(&self) -> Option<usize>;
    fn classify(&self, tile: &GrayTile) -> Result<Vec<f64>, NnError>;
}

impl TileClassifier for ClassifierModel {
    fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    fn input_size(&self) -> Option<usize> {
        Some(self.input_size)
    }

    fn classify(&self, tile: &GrayTile) -> Result<Vec<f64>, NnError> {
        self.forward_tile(tile)
    }
}

/// 3×3 median filter; border pixels use the in-bounds part of their window.
pub fn median3x3(pixels: &[u8], size: usize) -> Vec<u8> {
    let mut out = vec![0u8; pixels.len()];
    let mut win = [0u8; 9];
    for r in 0..size {
        for c in 0..size {
            let mut n = 0;
            for rr in r.saturating_sub(1)..(r + 2).min(size) {
                for cc in c.saturating_sub(1)..(c + 2).min(size) {
                    win[n] = pixels[rr * size + cc];
                    n += 1;
                }
            }
            win[..n].sort_unstable();
            out[r * size + c] = if n % 2 == 1 {
                win[n / 2]
            } else {
                (win[n / 2 - 1] as u16 + win[n / 2] as u16).div_ceil(2) as u8
            };
        }
    }
    out
}

/// Non-learned detector: flags a tile whose median-smoothed relief departs
/// from the tile's median level by more than a height threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineClassifier {
    pub height_threshold: f64,
    pub meta: ImageMeta,
    labels: Vec<String>,
}

impl BaselineClassifier {
    pub fn new(height_threshold: f64, meta: ImageMeta) -> Self {
        assert!(height_threshold > 0.0, "baseline threshold must be positive");
        Self {
            height_threshold,
            meta,
            labels: binary_labels(),
        }
    }

    /// Largest z-equivalent departure from the tile median after smoothing.
    pub fn max_deviation(&self, tile: &GrayTile) -> f64 {
        let smooth = median3x3(&tile.pixels, tile.size);
        let mut sorted = smooth.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
        };
        let spread = smooth.iter().map(|&g| (g as f64 - median).abs()).fold(0.0, f64::max);
        spread * self.meta.gray_step()
    }
}

impl TileClassifier for BaselineClassifier {
    fn class_labels(&self) -> &[String] {
        &self.labels
    }

    fn input_size(&self) -> Option<usize> {
        None
    }

    fn classify(&self, tile: &GrayTile) -> Result<Vec<f64>, NnError> {
        Ok(baseline_classify(tile, self.height_threshold, &self.meta))
    }
}

/// `[P(clean), P(not_clean)]`, either `[1, 0]` or `[0, 1]`.
pub fn baseline_classify(tile: &GrayTile, height_threshold: f64, meta: &ImageMeta) -> Vec<f64> {
    let b = BaselineClassifier {
        height_threshold,
        meta: *meta,
        labels: Vec::new(),
    };
    if b.max_deviation(tile) > height_threshold {
        vec![0.0, 1.0]
    } else {
        vec![1.0, 0.0]
    }
}
