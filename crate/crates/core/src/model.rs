//! Per-view encoder stacks with explicit forward caches, manual
//! backpropagation and a momentum-SGD update.
//!
//! A stack maps a clip `T × feat_dim` to
//! `z = normalize(h(mean_t f(frame_t)))` and to task logits
//! `g(mean_t f(frame_t))`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::View;
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, write_err};
use crate::numerics::{axpy, dot, RealMatrix, RealVector, ZERO_NORM_EPS};
use crate::seed::{rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`
    pub weight: RealMatrix,
    pub bias: RealVector,
}

impl Linear {
    /// LeCun-uniform: weights `U(-√(3/fan_in), √(3/fan_in))`, zero bias.
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (3.0 / fan_in as f64).sqrt();
        Self {
            weight: RealMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit)),
            bias: RealVector::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: RealMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: RealVector::zeros(self.bias.dim()),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Fully connected layers with tanh between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub output_activation: Activation,
}

/// Activations of every layer for one input, starting with the input itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn init(rng: &mut Rng, dims: &[usize], output_activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        Self {
            layers: dims.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect(),
            output_activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
            output_activation: self.output_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            Activation::Tanh
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.activation(l);
            let mut y = layer.weight.matvec(activations.last().unwrap());
            for (yi, b) in y.iter_mut().zip(layer.bias.as_slice()) {
                *yi = act.apply(*yi + b);
            }
            activations.push(y);
        }
        (activations.last().unwrap().clone(), MlpCache { activations })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut MlpParams) -> Vec<f64> {
        let mut delta = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let act = self.activation(l);
            let y = &cache.activations[l + 1];
            for (d, &yi) in delta.iter_mut().zip(y) {
                *d *= act.derivative_from_output(yi);
            }
            let input = &cache.activations[l];
            let g = &mut grads.layers[l];
            g.weight.add_outer(1.0, &delta, input);
            axpy(1.0, &delta, g.bias.as_mut_slice());
            delta = self.layers[l].weight.matvec_t(&delta);
        }
        delta
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.dim() == b.bias.dim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden_dim: 32 }
    }
}

/// Encoder `f`, projection head `h` and task head `g` for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStack {
    pub view: View,
    pub frozen: bool,
    pub f: MlpParams,
    pub h: MlpParams,
    pub g: MlpParams,
}

/// Gradients or optimizer state shaped like an [`EncoderStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub f: MlpParams,
    pub h: MlpParams,
    pub g: MlpParams,
}

impl StackGrads {
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.f.tensors().chain(self.h.tensors()).chain(self.g.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.f
            .tensors_mut()
            .chain(self.h.tensors_mut())
            .chain(self.g.tensors_mut())
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|&x| x == 0.0))
    }

    pub fn add_assign(&mut self, other: &StackGrads) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            axpy(1.0, b, a);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub frames: Vec<MlpCache>,
    pub hidden: Vec<f64>,
    pub projection: MlpCache,
    /// Projection before normalization.
    pub raw_z: Vec<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z: Vec<f64>,
    pub hidden: Vec<f64>,
    pub cache: ForwardCache,
}

impl EncoderStack {
    /// `f: feat → hidden → hidden (tanh)`, `h: hidden → proj`, `g: hidden → classes`.
    pub fn init(
        view: View,
        spec: &ModelSpec,
        feat_dim: usize,
        proj_dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng_from_seed(seed);
        let hd = spec.hidden_dim;
        Self {
            view,
            frozen: false,
            f: MlpParams::init(&mut rng, &[feat_dim, hd, hd], Activation::Tanh),
            h: MlpParams::init(&mut rng, &[hd, proj_dim], Activation::Identity),
            g: MlpParams::init(&mut rng, &[hd, n_classes], Activation::Identity),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.f.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.f.output_dim()
    }

    pub fn proj_dim(&self) -> usize {
        self.h.output_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.g.output_dim()
    }

    pub fn zero_grads(&self) -> StackGrads {
        StackGrads {
            f: self.f.zeros_like(),
            h: self.h.zeros_like(),
            g: self.g.zeros_like(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.f.tensors().chain(self.h.tensors()).chain(self.g.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.f
            .tensors_mut()
            .chain(self.h.tensors_mut())
            .chain(self.g.tensors_mut())
    }

    /// Same parameters bit for bit, ignoring the view tag and frozen flag.
    pub fn same_parameters(&self, other: &EncoderStack) -> bool {
        self.tensors().count() == other.tensors().count()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    fn matches(&self, grads: &StackGrads) -> bool {
        self.f.same_shape(&grads.f) && self.h.same_shape(&grads.h) && self.g.same_shape(&grads.g)
    }

    /// Projects a clip to a unit-norm feature.
    pub fn encode(&self, frames: &RealMatrix) -> Result<Encoded> {
        if frames.cols() != self.feat_dim() {
            return Err(Error::DimMismatch {
                expected: self.feat_dim(),
                actual: frames.cols(),
            });
        }
        let t = frames.rows();
        let mut hidden = vec![0.0; self.hidden_dim()];
        let mut frame_caches = Vec::with_capacity(t);
        for row in frames.row_iter() {
            let (y, cache) = self.f.forward(row);
            axpy(1.0, &y, &mut hidden);
            frame_caches.push(cache);
        }
        hidden.iter_mut().for_each(|x| *x /= t as f64);
        let (raw_z, projection) = self.h.forward(&hidden);
        let norm = dot(&raw_z, &raw_z).sqrt();
        if !(norm >= ZERO_NORM_EPS) {
            return Err(Error::ZeroNorm(norm));
        }
        let z = raw_z.iter().map(|x| x / norm).collect();
        Ok(Encoded {
            z,
            hidden: hidden.clone(),
            cache: ForwardCache {
                frames: frame_caches,
                hidden,
                projection,
                raw_z,
                norm,
            },
        })
    }

    /// Mean of the encoder output over frames, without the projection.
    pub fn pool(&self, frames: &RealMatrix) -> Result<Vec<f64>> {
        if frames.cols() != self.feat_dim() {
            return Err(Error::DimMismatch {
                expected: self.feat_dim(),
                actual: frames.cols(),
            });
        }
        let mut hidden = vec![0.0; self.hidden_dim()];
        for row in frames.row_iter() {
            axpy(1.0, &self.f.forward(row).0, &mut hidden);
        }
        hidden.iter_mut().for_each(|x| *x /= frames.rows() as f64);
        Ok(hidden)
    }

    /// Raw task logits for a pooled hidden vector.
    pub fn classify(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.g.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "hidden has {} entries, task head expects {}",
                hidden.len(),
                self.g.input_dim()
            )));
        }
        Ok(self.g.forward(hidden).0)
    }

    /// Backpropagates `grad_z` (w.r.t. the normalized projection) and
    /// `grad_logits` into `grads`, returning the gradient w.r.t. the frames.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_z: &[f64],
        grad_logits: &[f64],
        grads: &mut StackGrads,
    ) -> Result<RealMatrix> {
        if grad_z.len() != self.proj_dim() || grad_logits.len() != self.n_classes() {
            return Err(Error::ShapeMismatch(format!(
                "grad_z {} / grad_logits {} for a stack with proj {} and {} classes",
                grad_z.len(),
                grad_logits.len(),
                self.proj_dim(),
                self.n_classes()
            )));
        }
        if cache.hidden.len() != self.hidden_dim() || !self.matches(grads) {
            return Err(Error::ShapeMismatch("cache or gradients do not match the stack".into()));
        }
        let grad_raw = normalize_backward(&cache.raw_z, cache.norm, grad_z);
        let mut grad_hidden = self.h.backward(&cache.projection, &grad_raw, &mut grads.h);
        let (_, g_cache) = self.g.forward(&cache.hidden);
        let from_task = self.g.backward(&g_cache, grad_logits, &mut grads.g);
        axpy(1.0, &from_task, &mut grad_hidden);
        let t = cache.frames.len();
        grad_hidden.iter_mut().for_each(|x| *x /= t as f64);
        let mut grad_frames = RealMatrix::zeros(t, self.feat_dim());
        for (r, fc) in cache.frames.iter().enumerate() {
            let gx = self.f.backward(fc, &grad_hidden, &mut grads.f);
            grad_frames.row_mut(r).copy_from_slice(&gx);
        }
        Ok(grad_frames)
    }
}

/// Vector-Jacobian product of `u ↦ u/‖u‖`: `(I − zzᵀ) g / ‖u‖`.
pub fn normalize_backward(raw: &[f64], norm: f64, grad_z: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let proj = dot(&z, grad_z);
    grad_z
        .iter()
        .zip(&z)
        .map(|(g, zi)| (g - proj * zi) / norm)
        .collect()
}

/// Velocity buffers for [`sgd_momentum_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState(StackGrads);

impl MomentumState {
    pub fn new(stack: &EncoderStack) -> Self {
        Self(stack.zero_grads())
    }

    pub fn velocity(&self) -> &StackGrads {
        &self.0
    }
}

/// `v ← μv + g; p ← p − lr·v`. Frozen stacks are left untouched.
pub fn sgd_momentum_step(
    stack: &mut EncoderStack,
    grads: &StackGrads,
    lr: f64,
    momentum: f64,
    state: &mut MomentumState,
) -> Result<()> {
    if !stack.matches(grads) || !stack.matches(&state.0) {
        return Err(Error::ShapeMismatch("gradients do not match the stack".into()));
    }
    if stack.frozen {
        return Ok(());
    }
    for ((p, g), v) in stack
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.0.tensors_mut())
    {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Cosine decay from `base_lr` at epoch 0 towards zero at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Step decay: `base_lr · gamma^(epoch / step)`.
pub fn step_lr(epoch: usize, step: usize, gamma: f64, base_lr: f64) -> f64 {
    base_lr * gamma.powi((epoch / step.max(1)) as i32)
}

/// A stack tagged with the training stage that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub stage: String,
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub n_classes: usize,
    pub stack: EncoderStack,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, stack: EncoderStack) -> Self {
        Self {
            stage: stage.into(),
            feat_dim: stack.feat_dim(),
            hidden_dim: stack.hidden_dim(),
            proj_dim: stack.proj_dim(),
            n_classes: stack.n_classes(),
            stack,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, self).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(write_err(path))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(write_err(path))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let s = &ck.stack;
        if s.feat_dim() != ck.feat_dim
            || s.hidden_dim() != ck.hidden_dim
            || s.proj_dim() != ck.proj_dim
            || s.n_classes() != ck.n_classes
            || s.h.input_dim() != s.hidden_dim()
            || s.g.input_dim() != s.hidden_dim()
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "checkpoint metadata does not match its tensors".into(),
            });
        }
        Ok(ck)
    }
}
