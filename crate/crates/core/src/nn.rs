//! Dense feed-forward networks trained with backpropagation.
//!
//! Layers are fully connected with ReLU or sigmoid activations, optionally
//! followed by inverted dropout. Losses are mean squared error and
//! categorical cross-entropy; the latter normalizes the (sigmoid) outputs to
//! sum to one before taking logs. Optimizers are plain SGD and RMSprop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Added inside the log of the cross-entropy.
pub const CCE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_size: usize,
    pub output_size: usize,
    pub activation: Activation,
    /// Dropout applied to this layer's output during training.
    pub dropout_after: f64,
}

impl LayerSpec {
    pub fn new(
        input_size: usize,
        output_size: usize,
        activation: Activation,
        dropout_after: f64,
    ) -> Self {
        LayerSpec {
            input_size,
            output_size,
            activation,
            dropout_after,
        }
    }

    pub fn n_params(&self) -> usize {
        self.input_size * self.output_size + self.output_size
    }
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input_size == 0 || s.output_size == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension")));
        }
        if !(0.0..1.0).contains(&s.dropout_after) {
            return Err(Error::Config(format!(
                "layer {i} dropout {} outside [0, 1)",
                s.dropout_after
            )));
        }
        if i > 0 && specs[i - 1].output_size != s.input_size {
            return Err(Error::Config(format!(
                "layer {i} expects {} inputs but layer {} emits {}",
                s.input_size,
                i - 1,
                specs[i - 1].output_size
            )));
        }
    }
    Ok(())
}

/// 10 -> 5 -> 20 -> 5 -> 5 -> `outputs`, ReLU with dropout on the first four
/// layers and a sigmoid output layer.
pub fn home_net_spec(dropout: f64, outputs: usize) -> Vec<LayerSpec> {
    use Activation::*;
    vec![
        LayerSpec::new(10, 5, Relu, dropout),
        LayerSpec::new(5, 20, Relu, dropout),
        LayerSpec::new(20, 5, Relu, dropout),
        LayerSpec::new(5, 5, Relu, dropout),
        LayerSpec::new(5, outputs, Sigmoid, 0.0),
    ]
}

pub const DNNR_DROPOUT: f64 = 0.30;
pub const DNNC_DROPOUT: f64 = 0.20;

/// Home-scoring regression network.
pub fn dnnr_spec() -> Vec<LayerSpec> {
    home_net_spec(DNNR_DROPOUT, 1)
}

/// Two-output {not-home, home} verification network.
pub fn dnnc_spec() -> Vec<LayerSpec> {
    home_net_spec(DNNC_DROPOUT, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CategoricalCrossEntropy,
}

/// Loss of one prediction against its target.
pub fn loss(kind: LossKind, prediction: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(prediction.len(), target.len());
    match kind {
        LossKind::Mse => {
            prediction
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / prediction.len() as f64
        }
        LossKind::CategoricalCrossEntropy => {
            let sum: f64 = prediction.iter().sum();
            -prediction
                .iter()
                .zip(target)
                .map(|(p, t)| t * (p / sum + CCE_EPSILON).ln())
                .sum::<f64>()
        }
    }
}

/// d loss / d prediction.
fn loss_gradient(kind: LossKind, prediction: &[f64], target: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::Mse => {
            let k = prediction.len() as f64;
            prediction
                .iter()
                .zip(target)
                .map(|(p, t)| 2.0 * (p - t) / k)
                .collect()
        }
        LossKind::CategoricalCrossEntropy => {
            let sum: f64 = prediction.iter().sum();
            // dL/dq_c for the normalized q_c = p_c / sum
            let dq: Vec<f64> = prediction
                .iter()
                .zip(target)
                .map(|(p, t)| -t / (p / sum + CCE_EPSILON))
                .collect();
            let weighted: f64 =
                dq.iter().zip(prediction).map(|(g, p)| g * p).sum::<f64>() / (sum * sum);
            dq.iter().map(|g| g / sum - weighted).collect()
        }
    }
}

/// Probability of the second ("home") class after normalizing both outputs.
pub fn home_probability(output: &[f64]) -> f64 {
    let sum: f64 = output.iter().sum();
    if sum > 0.0 {
        output[1] / sum
    } else {
        0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `output_size x input_size`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(spec: LayerSpec) -> Self {
        Layer {
            spec,
            weights: vec![0.0; spec.input_size * spec.output_size],
            biases: vec![0.0; spec.output_size],
        }
    }

    /// Glorot-uniform weights, zero biases.
    fn glorot<R: Rng>(spec: LayerSpec, rng: &mut R) -> Self {
        let limit = (6.0 / (spec.input_size + spec.output_size) as f64).sqrt();
        let mut layer = Self::zeros(spec);
        for w in &mut layer.weights {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    fn pre_activation(&self, input: &[f64]) -> Vec<f64> {
        let n_in = self.spec.input_size;
        self.weights
            .chunks_exact(n_in)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
    },
    #[serde(rename = "rmsprop")]
    RmsProp {
        learning_rate: f64,
        rho: f64,
        epsilon: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig::Sgd { learning_rate }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        OptimizerConfig::RmsProp {
            learning_rate,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { learning_rate } => {
                learning_rate >= 0.0 && learning_rate.is_finite()
            }
            OptimizerConfig::RmsProp {
                learning_rate,
                rho,
                epsilon,
            } => {
                learning_rate >= 0.0
                    && learning_rate.is_finite()
                    && (0.0..1.0).contains(&rho)
                    && epsilon > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// `p <- p - lr * g`
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// `s <- rho s + (1 - rho) g^2`, then `p <- p - lr g / (sqrt(s) + eps)`.
pub fn rmsprop_step(
    mean_square: &mut [f64],
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    rho: f64,
    eps: f64,
) {
    for ((s, p), g) in mean_square.iter_mut().zip(params.iter_mut()).zip(grads) {
        *s = rho * *s + (1.0 - rho) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
}

/// Optimizer with its per-parameter accumulators (RMSprop only).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Per layer: (weights, biases) running mean squares.
    pub mean_square: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &MlpModel) -> Self {
        OptimizerState {
            config,
            mean_square: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) {
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[i];
            match self.config {
                OptimizerConfig::Sgd { learning_rate } => {
                    sgd_step(&mut layer.weights, gw, learning_rate);
                    sgd_step(&mut layer.biases, gb, learning_rate);
                }
                OptimizerConfig::RmsProp {
                    learning_rate,
                    rho,
                    epsilon,
                } => {
                    let (sw, sb) = &mut self.mean_square[i];
                    rmsprop_step(sw, &mut layer.weights, gw, learning_rate, rho, epsilon);
                    rmsprop_step(sb, &mut layer.biases, gb, learning_rate, rho, epsilon);
                }
            }
        }
    }
}

/// Gradients shaped like the model: per layer (weights, biases).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect(),
        }
    }

    /// Flattened in [`MlpModel::param`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    fn scale(&mut self, k: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= k);
        }
    }
}

/// Whether to apply dropout during a forward pass.
pub enum Mode<'r> {
    Infer,
    Train(&'r mut ChaCha8Rng),
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input fed to each layer.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    /// Activation before dropout.
    activations: Vec<Vec<f64>>,
    /// Per-unit dropout multipliers (0 or 1/(1-rate)); `None` if no dropout.
    masks: Vec<Option<Vec<f64>>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub trained: bool,
}

impl MlpModel {
    /// Glorot-initialized, untrained model.
    pub fn new(
        specs: &[LayerSpec],
        loss: LossKind,
        optimizer: OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = rng::stream(seed, 0);
        Ok(MlpModel {
            layers: specs.iter().map(|&s| Layer::glorot(s, &mut rng)).collect(),
            loss,
            optimizer,
            trained: false,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].spec.input_size
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_size
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.spec.n_params()).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, bool, usize) {
        for (k, l) in self.layers.iter().enumerate() {
            if i < l.weights.len() {
                return (k, true, i);
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                return (k, false, i);
            }
            i -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in layer order, weights before biases.
    pub fn param(&self, i: usize) -> f64 {
        let (k, is_w, j) = self.locate(i);
        if is_w {
            self.layers[k].weights[j]
        } else {
            self.layers[k].biases[j]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (k, is_w, j) = self.locate(i);
        if is_w {
            self.layers[k].weights[j] = v;
        } else {
            self.layers[k].biases[j] = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.specs())?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.spec.input_size * l.spec.output_size
                || l.biases.len() != l.spec.output_size
            {
                return Err(Error::Validation(format!(
                    "layer {i} parameter shape mismatch"
                )));
            }
        }
        self.optimizer.validate()
    }

    pub fn forward(&self, input: &[f64], mode: Mode<'_>) -> Result<ForwardCache> {
        if input.len() != self.input_size() {
            return Err(Error::Validation(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_size()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite network input".into()));
        }
        let mut rng = match mode {
            Mode::Infer => None,
            Mode::Train(r) => Some(r),
        };
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            activations: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
            output: Vec::new(),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&x);
            let a: Vec<f64> = z.iter().map(|&v| layer.spec.activation.apply(v)).collect();
            let rate = layer.spec.dropout_after;
            let mask = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    Some(
                        (0..a.len())
                            .map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep })
                            .collect::<Vec<f64>>(),
                    )
                }
                _ => None,
            };
            let out = match &mask {
                Some(m) => a.iter().zip(m).map(|(v, k)| v * k).collect(),
                None => a.clone(),
            };
            cache.inputs.push(std::mem::replace(&mut x, out));
            cache.pre.push(z);
            cache.activations.push(a);
            cache.masks.push(mask);
        }
        cache.output = x;
        Ok(cache)
    }

    /// Gradients of the loss of one forward pass, honoring its dropout masks.
    pub fn backward(&self, cache: &ForwardCache, target: &[f64]) -> Result<Gradients> {
        if target.len() != self.output_size() {
            return Err(Error::Validation(format!(
                "target has {} values, network emits {}",
                target.len(),
                self.output_size()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        self.accumulate(cache, target, &mut grads);
        Ok(grads)
    }

    fn accumulate(&self, cache: &ForwardCache, target: &[f64], grads: &mut Gradients) {
        // d loss / d (layer output after dropout)
        let mut upstream = loss_gradient(self.loss, &cache.output, target);
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let n_in = layer.spec.input_size;
            let delta: Vec<f64> = (0..layer.spec.output_size)
                .map(|o| {
                    let g = match &cache.masks[k] {
                        Some(m) => upstream[o] * m[o],
                        None => upstream[o],
                    };
                    g * layer
                        .spec
                        .activation
                        .derivative(cache.pre[k][o], cache.activations[k][o])
                })
                .collect();
            let (gw, gb) = &mut grads.layers[k];
            let input = &cache.inputs[k];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if k > 0 {
                let mut next = vec![0.0; n_in];
                for (o, d) in delta.iter().enumerate() {
                    for (acc, w) in next
                        .iter_mut()
                        .zip(&layer.weights[o * n_in..(o + 1) * n_in])
                    {
                        *acc += d * w;
                    }
                }
                upstream = next;
            }
        }
    }

    /// Mean loss and mean gradients over a batch.
    pub fn batch_gradients<I, T>(
        &self,
        inputs: &[I],
        targets: &[T],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Gradients)>
    where
        I: AsRef<[f64]>,
        T: AsRef<[f64]>,
    {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Validation(
                "batch inputs and targets must be non-empty and aligned".into(),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut total = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            let mode = match rng.as_deref_mut() {
                Some(r) => Mode::Train(r),
                None => Mode::Infer,
            };
            let cache = self.forward(x.as_ref(), mode)?;
            if t.as_ref().len() != self.output_size() {
                return Err(Error::Validation(
                    "target width does not match network output".into(),
                ));
            }
            total += loss(self.loss, &cache.output, t.as_ref());
            self.accumulate(&cache, t.as_ref(), &mut grads);
        }
        let n = inputs.len() as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads))
    }

    /// Mean inference-mode loss over a batch.
    pub fn mean_loss<I: AsRef<[f64]>, T: AsRef<[f64]>>(
        &self,
        inputs: &[I],
        targets: &[T],
    ) -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            total += loss(self.loss, &self.predict(x.as_ref())?, t.as_ref());
        }
        Ok(total / inputs.len() as f64)
    }

    /// Inference-mode output.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input, Mode::Infer)?.output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Mini-batch training with a seeded shuffle each epoch. Returns the model and
/// the mean training loss (dropout active) of every epoch.
pub fn train_with_history(
    specs: &[LayerSpec],
    loss_kind: LossKind,
    optimizer: OptimizerConfig,
    x: &Matrix,
    y: &Matrix,
    params: TrainParams,
) -> Result<(MlpModel, Vec<f64>)> {
    optimizer.validate()?;
    if x.rows() == 0 {
        return Err(Error::Validation("no training rows".into()));
    }
    if x.rows() != y.rows() {
        return Err(Error::Validation(format!(
            "{} inputs but {} targets",
            x.rows(),
            y.rows()
        )));
    }
    if params.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut model = MlpModel::new(specs, loss_kind, optimizer, params.seed)?;
    if x.cols() != model.input_size() || y.cols() != model.output_size() {
        return Err(Error::Validation(format!(
            "data is {}->{} but network is {}->{}",
            x.cols(),
            y.cols(),
            model.input_size(),
            model.output_size()
        )));
    }
    let mut state = OptimizerState::new(optimizer, &model);
    let mut rng = rng::stream(params.seed, 1);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| x.row(i)).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| y.row(i)).collect();
            let (l, grads) = model.batch_gradients(&xs, &ys, Some(&mut rng))?;
            if !l.is_finite()
                || grads
                    .layers
                    .iter()
                    .any(|(w, b)| w.iter().chain(b).any(|g| !g.is_finite()))
            {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient in epoch {epoch}"
                )));
            }
            epoch_loss += l * batch.len() as f64;
            state.step(&mut model, &grads);
        }
        history.push(epoch_loss / x.rows() as f64);
    }
    model.trained = params.epochs > 0;
    Ok((model, history))
}

pub fn train(
    specs: &[LayerSpec],
    loss_kind: LossKind,
    optimizer: OptimizerConfig,
    x: &Matrix,
    y: &Matrix,
    params: TrainParams,
) -> Result<MlpModel> {
    train_with_history(specs, loss_kind, optimizer, x, y, params).map(|(m, _)| m)
}
