//! Small feed-forward networks with exact reverse-mode gradients of the mean
//! squared error, AdamW, and a cosine learning-rate schedule with linear
//! warmup.
//!
//! Networks act on row batches: a layer maps `H ↦ act(H·W + b)`, and the
//! activation is skipped after the final layer.

use nalgebra::RowDVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbmError};
use crate::linalg::{hstack, select_rows, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    #[serde(alias = "relu")]
    Rectifier,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Swish => z / (1.0 + (-z).exp()),
            Activation::Rectifier => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = 1.0 / (1.0 + (-z).exp());
                s + z * s * (1.0 - s)
            }
            Activation::Rectifier => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_in × d_out`
    pub weight: Matrix,
    pub bias: RowDVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRepr {
    dims: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerRepr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRepr", into = "NetRepr")]
pub struct NeuralNet {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl From<NeuralNet> for NetRepr {
    fn from(net: NeuralNet) -> Self {
        NetRepr {
            dims: net.dims(),
            activation: net.activation,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRepr {
                    w: crate::linalg::rows::to_rows(&l.weight),
                    b: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetRepr> for NeuralNet {
    type Error = ScbmError;

    fn try_from(repr: NetRepr) -> Result<Self> {
        if repr.layers.len() + 1 != repr.dims.len() {
            return Err(ScbmError::Format("network dims do not match layer count".into()));
        }
        let mut layers = Vec::with_capacity(repr.layers.len());
        for (k, l) in repr.layers.iter().enumerate() {
            let weight = crate::linalg::rows::from_rows(&l.w, repr.dims[k + 1]).map_err(ScbmError::Format)?;
            if weight.shape() != (repr.dims[k], repr.dims[k + 1]) || l.b.len() != repr.dims[k + 1] {
                return Err(ScbmError::Format(format!("layer {k} has inconsistent shape")));
            }
            layers.push(Layer {
                weight,
                bias: RowDVector::from_row_slice(&l.b),
            });
        }
        NeuralNet::new(layers, repr.activation)
    }
}

impl NeuralNet {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(ScbmError::param("a network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.ncols() {
                return Err(ScbmError::param(format!(
                    "layer {k}: bias length differs from output dim"
                )));
            }
            if k > 0 && layers[k - 1].weight.ncols() != l.weight.nrows() {
                return Err(ScbmError::param(format!(
                    "layer {k}: input dim does not match previous layer"
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(ScbmError::param(format!("layer {k}: non-finite parameter")));
            }
        }
        Ok(NeuralNet { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weight.ncols()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Folds `x ↦ (x − shift) / scale` into the first layer.
    pub fn prepend_affine(&mut self, shift: &[f64], scale: &[f64]) {
        let first = &mut self.layers[0];
        for (mut row, &s) in first.weight.row_iter_mut().zip(scale) {
            row.unscale_mut(s);
        }
        let offset = RowDVector::from_row_slice(shift) * &first.weight;
        first.bias -= offset;
    }

    /// Folds `y ↦ y · scale + shift` into the last layer.
    pub fn append_affine(&mut self, scale: &[f64], shift: &[f64]) {
        let last = self.layers.last_mut().expect("nonempty");
        for c in 0..last.weight.ncols() {
            last.weight.column_mut(c).scale_mut(scale[c]);
            last.bias[c] = last.bias[c] * scale[c] + shift[c];
        }
    }

    fn flat_params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// How weights are drawn by [`init_net`]. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Entries i.i.d. uniform on [0, 1], optionally replaced by the
    /// orthonormal factor of their QR decomposition and multiplied by `gain`.
    /// Used for ground-truth mechanisms.
    Uniform01 { orthogonalize: bool, gain: f64 },
    /// Symmetric uniform on `±1/sqrt(fan_in)`; used for trainable networks.
    FanIn,
}

/// Orthonormal basis of the span of `w`: thin `Q` of `QR(w)` when `w` is
/// tall, otherwise the transposed `Q` of `QR(wᵀ)` (orthonormal rows, same row
/// space).
pub fn orthogonalize(w: &Matrix) -> Matrix {
    if w.nrows() >= w.ncols() {
        w.clone().qr().q()
    } else {
        w.transpose().qr().q().transpose()
    }
}

pub fn init_net<R: Rng + ?Sized>(
    dims: &[usize],
    activation: Activation,
    init: WeightInit,
    rng: &mut R,
) -> Result<NeuralNet> {
    if dims.len() < 2 {
        return Err(ScbmError::param("a network needs input and output dims"));
    }
    if dims.contains(&0) {
        return Err(ScbmError::param(format!("zero-width layer in {dims:?}")));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = match init {
                WeightInit::Uniform01 {
                    orthogonalize: orth,
                    gain,
                } => {
                    let raw = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random::<f64>());
                    let base = if orth { orthogonalize(&raw) } else { raw };
                    base * gain
                }
                WeightInit::FanIn => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
                }
            };
            Layer {
                weight,
                bias: RowDVector::zeros(fan_out),
            }
        })
        .collect();
    NeuralNet::new(layers, activation)
}

fn check_input(net: &NeuralNet, inputs: &Matrix) -> Result<()> {
    if inputs.ncols() != net.input_dim() {
        return Err(ScbmError::DimensionMismatch {
            context: "network input",
            expected: net.input_dim(),
            actual: inputs.ncols(),
        });
    }
    Ok(())
}

fn affine(h: &Matrix, layer: &Layer) -> Matrix {
    let mut z = h * &layer.weight;
    for mut row in z.row_iter_mut() {
        row += &layer.bias;
    }
    z
}

pub fn forward(net: &NeuralNet, inputs: &Matrix) -> Result<Matrix> {
    check_input(net, inputs)?;
    let last = net.layers.len() - 1;
    let mut h = inputs.clone();
    for (k, layer) in net.layers.iter().enumerate() {
        h = affine(&h, layer);
        if k < last {
            h.apply(|v| *v = net.activation.apply(*v));
        }
    }
    Ok(h)
}

/// Inputs to every layer plus the pre-activations of the hidden layers.
struct Trace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

fn forward_trace(net: &NeuralNet, inputs: &Matrix) -> Trace {
    let last = net.layers.len() - 1;
    let mut layer_inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut h = inputs.clone();
    for (k, layer) in net.layers.iter().enumerate() {
        let z = affine(&h, layer);
        layer_inputs.push(h);
        if k < last {
            h = z.map(|v| net.activation.apply(v));
            pre.push(z);
        } else {
            h = z;
        }
    }
    Trace {
        inputs: layer_inputs,
        pre,
        output: h,
    }
}

/// Parameter gradients laid out like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, RowDVector<f64>)>,
}

impl Gradients {
    fn flat(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flat()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Backpropagates `d_output` (gradient w.r.t. the network output) and
/// returns parameter gradients plus the gradient w.r.t. the input.
fn backward(net: &NeuralNet, trace: &Trace, d_output: Matrix) -> (Gradients, Matrix) {
    let mut grads = Vec::with_capacity(net.layers.len());
    let mut dz = d_output;
    for k in (0..net.layers.len()).rev() {
        let layer = &net.layers[k];
        let dw = trace.inputs[k].transpose() * &dz;
        let db = dz.row_sum();
        grads.push((dw, db));
        let mut dh = &dz * layer.weight.transpose();
        if k > 0 {
            dh.zip_apply(&trace.pre[k - 1], |g, z| *g *= net.activation.derivative(z));
        }
        dz = dh;
    }
    grads.reverse();
    (Gradients { layers: grads }, dz)
}

/// `‖Ŷ − Y‖²_F / n` and the gradient `2(Ŷ − Y)/n`.
fn mse_and_grad(pred: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let n = pred.nrows().max(1) as f64;
    let diff = pred - targets;
    let loss = diff.norm_squared() / n;
    (loss, diff * (2.0 / n))
}

pub fn mse(pred: &Matrix, targets: &Matrix) -> f64 {
    mse_and_grad(pred, targets).0
}

/// Exact gradient of the mean squared error over the batch.
pub fn grad(net: &NeuralNet, inputs: &Matrix, targets: &Matrix) -> Result<(f64, Gradients)> {
    check_input(net, inputs)?;
    if targets.shape() != (inputs.nrows(), net.output_dim()) {
        return Err(ScbmError::param(format!(
            "targets have shape {:?}, expected ({}, {})",
            targets.shape(),
            inputs.nrows(),
            net.output_dim()
        )));
    }
    let trace = forward_trace(net, inputs);
    let (loss, d_out) = mse_and_grad(&trace.output, targets);
    let (g, _) = backward(net, &trace, d_out);
    Ok((loss, g))
}

/// Gradients for an encoder–decoder pair where the decoder reads
/// `[encoder(x) ‖ cond]`.
pub fn encoder_decoder_grad(
    encoder: &NeuralNet,
    decoder: &NeuralNet,
    inputs: &Matrix,
    cond: Option<&Matrix>,
    targets: &Matrix,
) -> Result<(f64, Gradients, Gradients)> {
    check_input(encoder, inputs)?;
    let enc_trace = forward_trace(encoder, inputs);
    let dec_in = decoder_input(&enc_trace.output, cond)?;
    check_input(decoder, &dec_in)?;
    let dec_trace = forward_trace(decoder, &dec_in);
    let (loss, d_out) = mse_and_grad(&dec_trace.output, targets);
    let (g_dec, d_dec_in) = backward(decoder, &dec_trace, d_out);
    let d_code = d_dec_in.columns(0, encoder.output_dim()).into_owned();
    let (g_enc, _) = backward(encoder, &enc_trace, d_code);
    Ok((loss, g_enc, g_dec))
}

fn decoder_input(code: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
    match cond {
        Some(c) if c.ncols() > 0 => hstack(&[code, c]),
        _ => Ok(code.clone()),
    }
}

/// Output of `decoder([encoder(x) ‖ cond])`.
pub fn encoder_decoder_forward(
    encoder: &NeuralNet,
    decoder: &NeuralNet,
    inputs: &Matrix,
    cond: Option<&Matrix>,
) -> Result<Matrix> {
    let code = forward(encoder, inputs)?;
    forward(decoder, &decoder_input(&code, cond)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter list.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// One update of every parameter slice. Weight decay is decoupled:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + λ·p)`.
    pub fn step(&self, state: &mut AdamState, lr: f64, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        if state.m.is_empty() {
            state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            state.v = state.m.clone();
        }
        state.step += 1;
        let c1 = 1.0 - self.beta1.powi(state.step);
        let c2 = 1.0 - self.beta2.powi(state.step);
        for (slot, p) in params.into_iter().enumerate() {
            let g = grads[slot];
            let m = &mut state.m[slot];
            let v = &mut state.v[slot];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                if self.weight_decay != 0.0 {
                    p[k] -= lr * self.weight_decay * p[k];
                }
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    CosineWarmup {
        max_lr: f64,
        min_lr: f64,
        warmup_steps: usize,
        decay_steps: usize,
    },
    /// Cosine warmup whose phase lengths are fractions of the total number
    /// of training steps, resolved when training starts.
    CosineWarmupRelative {
        max_lr: f64,
        min_lr: f64,
        warmup_fraction: f64,
    },
}

impl LrSchedule {
    /// Linear ramp from 0 to `max_lr` over the warmup, cosine decay to
    /// `min_lr` over `decay_steps`, then constant.
    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::CosineWarmup {
                max_lr,
                min_lr,
                warmup_steps,
                decay_steps,
            } => {
                if step < warmup_steps {
                    return max_lr * step as f64 / warmup_steps as f64;
                }
                let t = step - warmup_steps;
                if t >= decay_steps {
                    return min_lr;
                }
                let w = 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / decay_steps as f64).cos());
                max_lr * w + min_lr * (1.0 - w)
            }
            LrSchedule::CosineWarmupRelative { .. } => self.resolve(usize::MAX).lr(step),
        }
    }

    /// Fixes relative phase lengths for a run of `total_steps` steps.
    pub fn resolve(&self, total_steps: usize) -> LrSchedule {
        match *self {
            LrSchedule::CosineWarmupRelative {
                max_lr,
                min_lr,
                warmup_fraction,
            } => {
                let warmup_steps = (total_steps as f64 * warmup_fraction).round() as usize;
                LrSchedule::CosineWarmup {
                    max_lr,
                    min_lr,
                    warmup_steps,
                    decay_steps: total_steps.saturating_sub(warmup_steps).max(1),
                }
            }
            other => other,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } if lr > 0.0 && lr.is_finite() => Ok(()),
            LrSchedule::CosineWarmup { max_lr, min_lr, .. } if min_lr > 0.0 && min_lr <= max_lr => Ok(()),
            LrSchedule::CosineWarmupRelative {
                max_lr,
                min_lr,
                warmup_fraction,
            } if min_lr > 0.0 && min_lr <= max_lr && (0.0..1.0).contains(&warmup_fraction) => Ok(()),
            _ => Err(ScbmError::param(format!("invalid learning-rate schedule {self:?}"))),
        }
    }
}

pub fn cosine_warmup_lr(step: usize, schedule: &LrSchedule) -> f64 {
    schedule.lr(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamW,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ScbmError::param("batch size must be at least 1"));
        }
        self.schedule.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    /// Sample-weighted mean training loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

impl<M> TrainOutcome<M> {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub encoder: NeuralNet,
    pub decoder: NeuralNet,
}

/// One mini-batch objective: returns the batch loss and applies nothing.
trait Objective {
    fn loss_and_grads(&self, rows: &[usize]) -> Result<(f64, Vec<Vec<f64>>)>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
}

struct RegressionObjective<'a> {
    net: NeuralNet,
    inputs: &'a Matrix,
    targets: &'a Matrix,
}

impl Objective for RegressionObjective<'_> {
    fn loss_and_grads(&self, rows: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let x = select_rows(self.inputs, rows);
        let y = select_rows(self.targets, rows);
        let (loss, g) = grad(&self.net, &x, &y)?;
        Ok((loss, g.flat().into_iter().map(<[f64]>::to_vec).collect()))
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.flat_params_mut()
    }
}

struct EncoderDecoderObjective<'a> {
    pair: EncoderDecoder,
    inputs: &'a Matrix,
    cond: Option<&'a Matrix>,
    targets: &'a Matrix,
}

impl Objective for EncoderDecoderObjective<'_> {
    fn loss_and_grads(&self, rows: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let x = select_rows(self.inputs, rows);
        let y = select_rows(self.targets, rows);
        let c = self.cond.map(|c| select_rows(c, rows));
        let (loss, ge, gd) = encoder_decoder_grad(&self.pair.encoder, &self.pair.decoder, &x, c.as_ref(), &y)?;
        let flat = ge.flat().into_iter().chain(gd.flat()).map(<[f64]>::to_vec).collect();
        Ok((loss, flat))
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.pair.encoder.flat_params_mut();
        p.extend(self.pair.decoder.flat_params_mut());
        p
    }
}

fn run_training<O: Objective>(objective: &mut O, n: usize, config: &TrainConfig) -> Result<(Vec<f64>, usize)> {
    config.validate()?;
    if n == 0 {
        return Err(ScbmError::param("cannot train on an empty dataset"));
    }
    let mut shuffle_rng = rng::stream(config.seed, rng::streams::AUX);
    let mut order: Vec<usize> = (0..n).collect();
    let schedule = config.schedule.resolve(config.epochs * config.steps_per_epoch(n));
    let mut state = AdamState::default();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = objective.loss_and_grads(batch)?;
            if !loss.is_finite() {
                return Err(ScbmError::Divergence { step, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            let lr = schedule.lr(step);
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            config
                .optimizer
                .step(&mut state, lr, objective.params_mut(), &grad_refs);
            step += 1;
        }
        trace.push(epoch_loss / n as f64);
    }
    Ok((trace, step))
}

fn check_rows(inputs: &Matrix, targets: &Matrix) -> Result<()> {
    if inputs.nrows() != targets.nrows() {
        return Err(ScbmError::DimensionMismatch {
            context: "training rows",
            expected: inputs.nrows(),
            actual: targets.nrows(),
        });
    }
    Ok(())
}

/// Mini-batch AdamW on a single network.
pub fn train_regressor(
    net: NeuralNet,
    inputs: &Matrix,
    targets: &Matrix,
    config: &TrainConfig,
) -> Result<TrainOutcome<NeuralNet>> {
    check_rows(inputs, targets)?;
    check_input(&net, inputs)?;
    if targets.ncols() != net.output_dim() {
        return Err(ScbmError::DimensionMismatch {
            context: "training targets",
            expected: net.output_dim(),
            actual: targets.ncols(),
        });
    }
    let mut obj = RegressionObjective { net, inputs, targets };
    let (loss_trace, steps) = run_training(&mut obj, inputs.nrows(), config)?;
    Ok(TrainOutcome {
        model: obj.net,
        loss_trace,
        steps,
    })
}

/// Mini-batch AdamW on an encoder–decoder pair. The encoder sees only
/// `inputs`; `cond` enters at the decoder input next to the code.
pub fn train_encoder_decoder(
    pair: EncoderDecoder,
    inputs: &Matrix,
    cond: Option<&Matrix>,
    targets: &Matrix,
    config: &TrainConfig,
) -> Result<TrainOutcome<EncoderDecoder>> {
    check_rows(inputs, targets)?;
    check_input(&pair.encoder, inputs)?;
    let cond_dim = cond.map_or(0, Matrix::ncols);
    if let Some(c) = cond {
        check_rows(inputs, c)?;
    }
    if pair.decoder.input_dim() != pair.encoder.output_dim() + cond_dim {
        return Err(ScbmError::DimensionMismatch {
            context: "decoder input",
            expected: pair.encoder.output_dim() + cond_dim,
            actual: pair.decoder.input_dim(),
        });
    }
    if targets.ncols() != pair.decoder.output_dim() {
        return Err(ScbmError::DimensionMismatch {
            context: "training targets",
            expected: pair.decoder.output_dim(),
            actual: targets.ncols(),
        });
    }
    let mut obj = EncoderDecoderObjective {
        pair,
        inputs,
        cond,
        targets,
    };
    let (loss_trace, steps) = run_training(&mut obj, inputs.nrows(), config)?;
    Ok(TrainOutcome {
        model: obj.pair,
        loss_trace,
        steps,
    })
}
