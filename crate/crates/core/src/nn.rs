//! Dense layers with hand-written gradients, the Gaussian finite-rate gate,
//! binary cross-entropy, Adam and a plug-in mutual information estimator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{0}: backward called without a cached forward pass")]
    NoCachedForward(&'static str),
    #[error("tensor buffer has {len} entries, expected {rows}x{cols}")]
    BadBuffer {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("count table is empty or all zero")]
    EmptyTable,
    #[error("count table rows have different lengths")]
    RaggedTable,
    #[error("rate weight must be finite and >= 0, got {0}")]
    NegativeRateWeight(f64),
}

/// Row-major batch matrix; one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::BadBuffer {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn expect_shape(&self, op: &'static str, expected: (usize, usize)) -> Result<(), NnError> {
        if self.shape() != expected {
            return Err(NnError::Shape {
                op,
                expected,
                got: self.shape(),
            });
        }
        Ok(())
    }

    /// Elementwise in-place sum.
    pub fn add_assign(&mut self, other: &Tensor2) -> Result<(), NnError> {
        other.expect_shape("add", self.shape())?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// Horizontal concatenation of equally tall tensors.
    pub fn hcat(parts: &[&Tensor2]) -> Result<Tensor2, NnError> {
        let rows = parts.first().map_or(0, |t| t.rows);
        let cols = parts.iter().map(|t| t.cols).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for t in parts {
            t.expect_shape("hcat", (rows, t.cols))?;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        Ok(out)
    }

    /// Column block `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Tensor2 {
        Tensor2::from_fn(self.rows, width, |r, c| self.get(r, start + c))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, pre: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Anything holding parameters with matching gradient buffers.
pub trait Trainable {
    /// Calls `f(params, grads)` for every parameter block in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn param_count(&self) -> usize;
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Tensor2,
    pre: Tensor2,
    output: Tensor2,
}

/// Fully connected layer `activation(x W^T + b)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cache: Option<DenseCache>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        let weight = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self::from_parts(in_dim, out_dim, activation, weight, vec![0.0; out_dim])
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        assert_eq!(weight.len(), in_dim * out_dim, "weight buffer size");
        assert_eq!(bias.len(), out_dim, "bias buffer size");
        Self {
            in_dim,
            out_dim,
            activation,
            weight,
            bias,
            grad_weight: vec![0.0; in_dim * out_dim],
            grad_bias: vec![0.0; out_dim],
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Forward pass without caching, for evaluation.
    pub fn infer(&self, input: &Tensor2) -> Result<Tensor2, NnError> {
        self.compute(input).map(|(_, out)| out)
    }

    fn compute(&self, input: &Tensor2) -> Result<(Tensor2, Tensor2), NnError> {
        if input.cols() != self.in_dim {
            return Err(NnError::Shape {
                op: "dense_forward",
                expected: (input.rows(), self.in_dim),
                got: input.shape(),
            });
        }
        let mut pre = Tensor2::zeros(input.rows(), self.out_dim);
        for r in 0..input.rows() {
            let x = input.row(r);
            for o in 0..self.out_dim {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let z = self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                pre.set(r, o, z);
            }
        }
        let mut out = pre.clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = self.activation.apply(*v));
        Ok((pre, out))
    }

    /// Forward pass that caches what the backward pass needs.
    pub fn forward(&mut self, input: &Tensor2) -> Result<Tensor2, NnError> {
        let (pre, output) = self.compute(input)?;
        self.cache = Some(DenseCache {
            input: input.clone(),
            pre,
            output: output.clone(),
        });
        Ok(output)
    }

    /// Accumulates parameter gradients and returns the error wrt the input.
    pub fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2, NnError> {
        let cache = self
            .cache
            .take()
            .ok_or(NnError::NoCachedForward("dense_backward"))?;
        if upstream.shape() != cache.output.shape() {
            let err = NnError::Shape {
                op: "dense_backward",
                expected: cache.output.shape(),
                got: upstream.shape(),
            };
            self.cache = Some(cache);
            return Err(err);
        }
        let batch = upstream.rows();
        let mut downstream = Tensor2::zeros(batch, self.in_dim);
        for r in 0..batch {
            let x = cache.input.row(r);
            for o in 0..self.out_dim {
                let delta = upstream.get(r, o)
                    * self
                        .activation
                        .derivative_from_output(cache.pre.get(r, o), cache.output.get(r, o));
                if delta == 0.0 {
                    continue;
                }
                self.grad_bias[o] += delta;
                let row = o * self.in_dim;
                let grad_row = &mut self.grad_weight[row..row + self.in_dim];
                let weight_row = &self.weight[row..row + self.in_dim];
                let down_row = &mut downstream.data[r * self.in_dim..(r + 1) * self.in_dim];
                for (((g, d), &w), &xi) in grad_row.iter_mut().zip(down_row).zip(weight_row).zip(x)
                {
                    *g += delta * xi;
                    *d += delta * w;
                }
            }
        }
        Ok(downstream)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Trainable for DenseLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(&mut self.weight, &mut self.grad_weight);
        f(&mut self.bias, &mut self.grad_bias);
    }

    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Mean binary cross-entropy on logits and its gradient wrt the logits.
///
/// Uses `max(z, 0) - z*y + ln(1 + exp(-|z|))`, finite for any finite logit.
pub fn bce_with_logits(logits: &Tensor2, labels: &Tensor2) -> Result<(f64, Tensor2), NnError> {
    labels.expect_shape("bce_with_logits", logits.shape())?;
    let n = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    for (i, (&z, &y)) in logits.data().iter().zip(labels.data()).enumerate() {
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.data[i] = (sigmoid(z) - y) / n;
    }
    Ok((total / n, grad))
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

/// KL divergence of `N(mu, diag(exp(logvar)))` to `N(0, I)` for each row, in nats.
pub fn gaussian_kl(mu: &Tensor2, logvar: &Tensor2) -> Result<Vec<f64>, NnError> {
    logvar.expect_shape("gaussian_kl", mu.shape())?;
    Ok((0..mu.rows())
        .map(|r| {
            mu.row(r)
                .iter()
                .zip(logvar.row(r))
                .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
                .sum()
        })
        .collect())
}

/// Output of one stochastic gate pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub message: Tensor2,
    /// KL of each sample's posterior to the prior, in nats.
    pub kl_per_sample: Vec<f64>,
    /// Batch mean of `kl_per_sample`.
    pub kl_mean: f64,
}

/// Gaussian bottleneck `T = mu + exp(logvar / 2) * eps` with a standard-normal prior.
#[derive(Debug, Clone, Default)]
pub struct GaussianGate {
    cache: Option<GateCache>,
}

#[derive(Debug, Clone)]
struct GateCache {
    mu: Tensor2,
    logvar: Tensor2,
    noise: Tensor2,
}

impl GaussianGate {
    pub fn new() -> Self {
        Self::default()
    }

    /// Samples fresh standard-normal noise and runs the gate.
    pub fn forward(
        &mut self,
        mu: &Tensor2,
        logvar: &Tensor2,
        rng: &mut impl Rng,
    ) -> Result<GateOutput, NnError> {
        let noise = Tensor2::from_fn(mu.rows(), mu.cols(), |_, _| StandardNormal.sample(rng));
        self.forward_with_noise(mu, logvar, noise)
    }

    /// Runs the gate with caller-supplied noise.
    pub fn forward_with_noise(
        &mut self,
        mu: &Tensor2,
        logvar: &Tensor2,
        noise: Tensor2,
    ) -> Result<GateOutput, NnError> {
        noise.expect_shape("gate_forward", mu.shape())?;
        let kl_per_sample = gaussian_kl(mu, logvar)?;
        let mut message = mu.clone();
        for ((m, lv), e) in message.data.iter_mut().zip(logvar.data()).zip(noise.data()) {
            *m += (0.5 * lv).exp() * e;
        }
        let kl_mean = mean(&kl_per_sample);
        self.cache = Some(GateCache {
            mu: mu.clone(),
            logvar: logvar.clone(),
            noise,
        });
        Ok(GateOutput {
            message,
            kl_per_sample,
            kl_mean,
        })
    }

    /// Deterministic evaluation pass: emits `mu`, still reports the KL.
    pub fn infer(mu: &Tensor2, logvar: &Tensor2) -> Result<GateOutput, NnError> {
        let kl_per_sample = gaussian_kl(mu, logvar)?;
        let kl_mean = mean(&kl_per_sample);
        Ok(GateOutput {
            message: mu.clone(),
            kl_per_sample,
            kl_mean,
        })
    }

    /// Gradients wrt `(mu, logvar)` of `task_loss + rate_weight * mean_batch(KL)`,
    /// given the task-loss error on the emitted message.
    pub fn backward(
        &mut self,
        upstream: &Tensor2,
        rate_weight: f64,
    ) -> Result<(Tensor2, Tensor2), NnError> {
        if !(rate_weight.is_finite() && rate_weight >= 0.0) {
            return Err(NnError::NegativeRateWeight(rate_weight));
        }
        let cache = self
            .cache
            .as_ref()
            .ok_or(NnError::NoCachedForward("gate_backward"))?;
        upstream.expect_shape("gate_backward", cache.mu.shape())?;
        let k = rate_weight / cache.mu.rows().max(1) as f64;
        let mut d_mu = upstream.clone();
        let mut d_logvar = Tensor2::zeros(upstream.rows(), upstream.cols());
        for i in 0..upstream.len() {
            let m = cache.mu.data[i];
            let lv = cache.logvar.data[i];
            let sigma = (0.5 * lv).exp();
            d_mu.data[i] += k * m;
            d_logvar.data[i] =
                upstream.data[i] * 0.5 * sigma * cache.noise.data[i] + k * 0.5 * (lv.exp() - 1.0);
        }
        self.cache = None;
        Ok((d_mu, d_logvar))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    /// One bias-corrected update; zeroes `grads` afterwards.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) -> Result<(), NnError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NnError::Shape {
                op: "adam_step",
                expected: (self.first.len(), 1),
                got: (params.len().min(grads.len()), 1),
            });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
            self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            grads[i] = 0.0;
        }
        Ok(())
    }
}

/// Adam over every parameter block of a model, in visit order.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Trainable) -> Result<(), NnError> {
        let mut slot = 0;
        let mut result = Ok(());
        let config = self.config;
        let states = &mut self.states;
        model.visit_params(&mut |params, grads| {
            if states.len() == slot {
                states.push(AdamState::new(config, params.len()));
            }
            if result.is_ok() {
                result = states[slot].step(params, grads);
            }
            slot += 1;
        });
        result
    }
}

/// Plug-in mutual information of a joint count table, in nats.
pub fn empirical_mi(counts: &[Vec<u64>]) -> Result<f64, NnError> {
    let cols = counts.first().map_or(0, Vec::len);
    if counts.iter().any(|row| row.len() != cols) {
        return Err(NnError::RaggedTable);
    }
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return Err(NnError::EmptyTable);
    }
    let n = total as f64;
    let row_sums: Vec<f64> = counts
        .iter()
        .map(|r| r.iter().sum::<u64>() as f64)
        .collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|c| counts.iter().map(|r| r[c]).sum::<u64>() as f64)
        .collect();
    let mut mi = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / n * (c * n / (row_sums[i] * col_sums[j])).ln();
        }
    }
    // Rounding can leave a tiny negative value for independent tables.
    Ok(mi.max(0.0))
}
