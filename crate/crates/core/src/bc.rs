//! Behavioral cloning with a small tanh multilayer perceptron.
//!
//! The policy regresses actions on z-scored states with a mean squared error
//! objective and is trained by minibatch Adam. Gradients are computed by hand
//! written backpropagation; parameters live in one flat vector so the
//! optimizer and gradient checks can treat them uniformly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pmobstacle::{Policy, Vec2};
use crate::rng::{self, Rng};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension z-score transform fitted on training states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation of `states` (row-major, `dim` columns).
    pub fn fit(states: &[f64], dim: usize) -> Self {
        let n = (states.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in states.chunks_exact(dim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in states.chunks_exact(dim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (x[k] - self.mean[k]) / self.std[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    layer_sizes: Vec<usize>,
    /// For each layer: weights `[out][in]` row-major, then biases `[out]`.
    params: Vec<f64>,
    normalizer: Normalizer,
}

/// Offsets of layer `l`'s weights and biases in the flat parameter vector.
fn layer_offsets(sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut off = 0;
    sizes
        .windows(2)
        .map(|w| {
            let w_off = off;
            off += w[0] * w[1];
            let b_off = off;
            off += w[1];
            (w_off, b_off)
        })
        .collect()
}

fn n_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Dot product with four independent accumulators in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl MlpPolicy {
    /// Xavier-uniform weights, zero biases, identity normalizer.
    pub fn new(layer_sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::argument("layer sizes need an input and an output, all positive"));
        }
        let mut params = vec![0.0; n_params(layer_sizes)];
        for (w, &(w_off, _)) in layer_sizes.windows(2).zip(&layer_offsets(layer_sizes)) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for p in &mut params[w_off..w_off + w[0] * w[1]] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
            normalizer: Normalizer::identity(layer_sizes[0]),
        })
    }

    /// Assemble a policy from per-layer `[out][in]` row-major weights and biases.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        normalizer: Normalizer,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::argument("layer sizes need an input and an output, all positive"));
        }
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::argument(format!("expected {n_layers} weight and bias arrays")));
        }
        let mut params = Vec::with_capacity(n_params(&layer_sizes));
        for (l, w) in layer_sizes.windows(2).enumerate() {
            if weights[l].len() != w[0] * w[1] || biases[l].len() != w[1] {
                return Err(Error::argument(format!(
                    "layer {l} arrays do not match {}x{}",
                    w[1], w[0]
                )));
            }
            params.extend_from_slice(&weights[l]);
            params.extend_from_slice(&biases[l]);
        }
        let d = layer_sizes[0];
        if normalizer.mean.len() != d || normalizer.std.len() != d {
            return Err(Error::argument("normalizer dimension differs from input layer"));
        }
        if normalizer.std.iter().any(|&s| !(s >= STD_FLOOR)) {
            return Err(Error::argument(format!(
                "normalizer std entries must be >= {STD_FLOOR}"
            )));
        }
        Ok(Self {
            layer_sizes,
            params,
            normalizer,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) -> Result<()> {
        if normalizer.mean.len() != self.input_dim() || normalizer.std.len() != self.input_dim() {
            return Err(Error::argument("normalizer dimension differs from input layer"));
        }
        self.normalizer = normalizer;
        Ok(())
    }

    /// Weights of layer `l`, `[out][in]` row-major.
    pub fn weights(&self, l: usize) -> &[f64] {
        let (w_off, b_off) = layer_offsets(&self.layer_sizes)[l];
        &self.params[w_off..b_off]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let (_, b_off) = layer_offsets(&self.layer_sizes)[l];
        &self.params[b_off..b_off + self.layer_sizes[l + 1]]
    }

    pub fn predict(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.input_dim() {
            return Err(Error::argument(format!(
                "state has dimension {}, policy expects {}",
                state.len(),
                self.input_dim()
            )));
        }
        let mut ws = Workspace::new(&self.layer_sizes, 1);
        self.forward(state, 1, &mut ws);
        Ok(ws.acts.last().expect("output layer").clone())
    }

    /// Forward pass over `n` row-major states, keeping every layer's activations.
    fn forward(&self, states: &[f64], n: usize, ws: &mut Workspace) {
        let d = self.input_dim();
        ws.resize(&self.layer_sizes, n);
        for b in 0..n {
            self.normalizer
                .apply(&states[b * d..(b + 1) * d], &mut ws.acts[0][b * d..(b + 1) * d]);
        }
        let offsets = layer_offsets(&self.layer_sizes);
        let last = self.n_layers() - 1;
        for (l, &(w_off, b_off)) in offsets.iter().enumerate() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[w_off..b_off];
            let bias = &self.params[b_off..b_off + fan_out];
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l];
            let output = &mut after[0];
            for b in 0..n {
                let x = &input[b * fan_in..(b + 1) * fan_in];
                let z = &mut output[b * fan_out..(b + 1) * fan_out];
                for o in 0..fan_out {
                    let v = dot(&w[o * fan_in..(o + 1) * fan_in], x) + bias[o];
                    z[o] = if l == last { v } else { v.tanh() };
                }
            }
        }
    }

    /// Mean squared error over `n` samples and its gradient, accumulated into `grad`.
    fn loss_grad_into(&self, states: &[f64], actions: &[f64], n: usize, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        self.forward(states, n, ws);
        let d_out = self.output_dim();
        let scale = 1.0 / (n * d_out) as f64;
        let mut sq = 0.0;
        {
            let y = ws.acts.last().expect("output layer");
            let delta = &mut ws.deltas[self.n_layers() - 1];
            for k in 0..n * d_out {
                let r = y[k] - actions[k];
                sq += r * r;
                delta[k] = 2.0 * scale * r;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let offsets = layer_offsets(&self.layer_sizes);
        for l in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w_off, b_off) = offsets[l];
            let w = &self.params[w_off..b_off];
            let (gw, gb) = grad[w_off..b_off + fan_out].split_at_mut(fan_in * fan_out);
            let input = &ws.acts[l];
            let (lower, upper) = ws.deltas.split_at_mut(l);
            let delta = &upper[0];
            for b in 0..n {
                let x = &input[b * fan_in..(b + 1) * fan_in];
                let db = &delta[b * fan_out..(b + 1) * fan_out];
                for o in 0..fan_out {
                    axpy(&mut gw[o * fan_in..(o + 1) * fan_in], db[o], x);
                }
                axpy(gb, 1.0, db);
            }
            if l > 0 {
                let prev = &mut lower[l - 1];
                for b in 0..n {
                    let dp = &mut prev[b * fan_in..(b + 1) * fan_in];
                    dp.iter_mut().for_each(|v| *v = 0.0);
                    let db = &delta[b * fan_out..(b + 1) * fan_out];
                    for o in 0..fan_out {
                        axpy(dp, db[o], &w[o * fan_in..(o + 1) * fan_in]);
                    }
                    // tanh'(z) = 1 - tanh(z)^2, with tanh(z) the stored activation.
                    for (v, a) in dp.iter_mut().zip(&input[b * fan_in..(b + 1) * fan_in]) {
                        *v *= 1.0 - a * a;
                    }
                }
            }
        }
        sq * scale
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            weights: (0..self.n_layers()).map(|l| self.weights(l).to_vec()).collect(),
            biases: (0..self.n_layers()).map(|l| self.biases(l).to_vec()).collect(),
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::argument(format!(
                "unsupported checkpoint format_version {} (expected {CHECKPOINT_VERSION})",
                c.format_version
            )));
        }
        Self::from_parts(c.layer_sizes, c.weights, c.biases, c.normalizer)
    }
}

impl Policy for MlpPolicy {
    fn act(&mut self, state: Vec2, _rng: &mut Rng) -> Vec2 {
        let a = self.predict(&state).expect("policy trained on 2-D states");
        [a[0], a[1]]
    }
}

/// Activation and backpropagated-error buffers for a batch.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(sizes: &[usize], n: usize) -> Self {
        let mut ws = Self {
            acts: Vec::new(),
            deltas: Vec::new(),
        };
        ws.resize(sizes, n);
        ws
    }

    fn resize(&mut self, sizes: &[usize], n: usize) {
        self.acts.resize(sizes.len(), Vec::new());
        self.deltas.resize(sizes.len() - 1, Vec::new());
        for (a, &s) in self.acts.iter_mut().zip(sizes) {
            a.resize(n * s, 0.0);
        }
        for (d, &s) in self.deltas.iter_mut().zip(&sizes[1..]) {
            d.resize(n * s, 0.0);
        }
    }
}

fn flatten(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<Vec<f64>> {
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::argument(format!("{what} rows must all have dimension {dim}")));
    }
    Ok(rows.concat())
}

/// Mean over batch and action dimensions of `(predict(s) - a)^2`, and its
/// gradient laid out like [`MlpPolicy::params`].
pub fn loss_and_gradient(policy: &MlpPolicy, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if states.is_empty() || states.len() != actions.len() {
        return Err(Error::argument("batch must be nonempty with one action per state"));
    }
    let s = flatten(states, policy.input_dim(), "state")?;
    let a = flatten(actions, policy.output_dim(), "action")?;
    let mut ws = Workspace::new(&policy.layer_sizes, states.len());
    let mut grad = vec![0.0; policy.params.len()];
    let loss = policy.loss_grad_into(&s, &a, states.len(), &mut ws, &mut grad);
    Ok((loss, grad))
}

/// Mean squared error of `policy` on the given samples.
pub fn mse(policy: &MlpPolicy, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<f64> {
    Ok(loss_and_gradient(policy, states, actions)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Lower bound on the number of optimizer updates. Small datasets fit in
    /// one batch per epoch, so `epochs` alone can leave them undertrained;
    /// when set, the epoch count is raised until this many updates are made.
    pub min_updates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64],
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            min_updates: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) {
            return Err(Error::argument("hidden layer sizes must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::argument("learning_rate, epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::argument(
                "Adam decays must lie in [0, 1) and epsilon be positive",
            ));
        }
        Ok(())
    }

    /// Epochs actually run for `n_samples` training samples.
    pub fn effective_epochs(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.batch_size).max(1);
        self.epochs.max(self.min_updates.div_ceil(per_epoch))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.adam_epsilon);
        }
    }
}

/// Train on explicit state/action rows. Returns the policy and the mean
/// minibatch loss of every epoch.
pub fn train_on_samples(
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<(MlpPolicy, Vec<f64>)> {
    config.validate()?;
    if states.is_empty() || states.len() != actions.len() {
        return Err(Error::argument("training needs a nonempty set of state/action pairs"));
    }
    let d_in = states[0].len();
    let d_out = actions[0].len();
    if d_in == 0 || d_out == 0 {
        return Err(Error::argument("states and actions must have positive dimension"));
    }
    let s = flatten(states, d_in, "state")?;
    let a = flatten(actions, d_out, "action")?;
    let n = states.len();

    let mut sizes = vec![d_in];
    sizes.extend(&config.hidden_sizes);
    sizes.push(d_out);
    let mut rng = rng::seeded(config.seed);
    let mut policy = MlpPolicy::new(&sizes, &mut rng)?;
    policy.normalizer = Normalizer::fit(&s, d_in);

    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut bs = vec![0.0; batch * d_in];
    let mut ba = vec![0.0; batch * d_out];
    let mut grad = vec![0.0; policy.params.len()];
    let mut ws = Workspace::new(&sizes, batch);
    let mut adam = Adam::new(policy.params.len());
    let epochs = config.effective_epochs(n);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let m = chunk.len();
            for (j, &i) in chunk.iter().enumerate() {
                bs[j * d_in..(j + 1) * d_in].copy_from_slice(&s[i * d_in..(i + 1) * d_in]);
                ba[j * d_out..(j + 1) * d_out].copy_from_slice(&a[i * d_out..(i + 1) * d_out]);
            }
            let loss = policy.loss_grad_into(&bs[..m * d_in], &ba[..m * d_out], m, &mut ws, &mut grad);
            epoch_loss += loss * m as f64;
            adam.step(&mut policy.params, &grad, config);
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((policy, history))
}

/// Fit a policy to every transition of `dataset`, with per-epoch loss history.
pub fn train_with_history(dataset: &Dataset, config: &TrainConfig) -> Result<(MlpPolicy, Vec<f64>)> {
    dataset.validate()?;
    let states: Vec<Vec<f64>> = dataset.transitions().map(|t| t.state.clone()).collect();
    let actions: Vec<Vec<f64>> = dataset.transitions().map(|t| t.action.clone()).collect();
    train_on_samples(&states, &actions, config)
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<MlpPolicy> {
    Ok(train_with_history(dataset, config)?.0)
}

/// On-disk policy: layer sizes, `[out][in]` row-major weights, biases and
/// normalizer statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub normalizer: Normalizer,
}

pub fn save_policy(policy: &MlpPolicy, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &policy.to_checkpoint()).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<MlpPolicy> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let c: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    MlpPolicy::from_checkpoint(c)
}
