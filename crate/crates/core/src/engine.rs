//! In-network learning over a training topology.
//!
//! Every node owns its module. A training step is two waves: activations
//! travel along active edges in topological order, then error vectors travel
//! the same edges in reverse. Each transmission is recorded in a
//! [`WaveTrace`], which is what the exchange accounting is checked against.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, NodeId, TrainingTopology};
use crate::nn::{
    bce_with_logits, sigmoid, Activation, Adam, AdamConfig, DenseLayer, GaussianGate, NnError,
    Tensor2, Trainable,
};
use crate::rng::{self, purpose, StreamRng};
use crate::task::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("unsupported topology: {0}")]
    Unsupported(String),
    #[error("backward wave requested without a matching training forward wave")]
    NoForward,
    #[error("non-finite objective {value} at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(
        "dataset has {got_sensors} sensors of dim {got_dim}, model expects {sensors} of dim {dim}"
    )]
    DatasetMismatch {
        sensors: usize,
        dim: usize,
        got_sensors: usize,
        got_dim: usize,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Layer sizes of the node modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub obs_dim: usize,
    pub sensor_hidden: usize,
    /// Scalars per message; must equal every active edge width.
    pub message_width: usize,
    pub relay_hidden: usize,
    pub fusion_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            obs_dim: 2,
            sensor_hidden: 16,
            message_width: 3,
            relay_hidden: 8,
            fusion_hidden: 16,
        }
    }
}

/// Encoder with a Gaussian message head.
#[derive(Debug, Clone)]
pub struct SensorModule {
    pub encoder: DenseLayer,
    pub mu_head: DenseLayer,
    pub logvar_head: DenseLayer,
    gate: GaussianGate,
    noise: StreamRng,
}

/// Mean of incoming messages followed by a two-layer transform.
#[derive(Debug, Clone)]
pub struct RelayModule {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

/// Two-layer classifier over the concatenated parent messages.
#[derive(Debug, Clone)]
pub struct FusionModule {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

// Sensors dominate the node count, so boxing them would not save memory.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum NodeModule {
    Sensor(SensorModule),
    Relay(RelayModule),
    Fusion(FusionModule),
}

impl Trainable for NodeModule {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        match self {
            NodeModule::Sensor(m) => {
                m.encoder.visit_params(f);
                m.mu_head.visit_params(f);
                m.logvar_head.visit_params(f);
            }
            NodeModule::Relay(m) => {
                m.hidden.visit_params(f);
                m.output.visit_params(f);
            }
            NodeModule::Fusion(m) => {
                m.hidden.visit_params(f);
                m.output.visit_params(f);
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            NodeModule::Sensor(m) => {
                m.encoder.param_count() + m.mu_head.param_count() + m.logvar_head.param_count()
            }
            NodeModule::Relay(m) => m.hidden.param_count() + m.output.param_count(),
            NodeModule::Fusion(m) => m.hidden.param_count() + m.output.param_count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// One message crossing an edge for a whole batch. Backward entries name the
/// edge in its forward orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub from: NodeId,
    pub to: NodeId,
    pub direction: Direction,
    pub samples: usize,
    pub scalars: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WaveTrace {
    pub entries: Vec<Transmission>,
}

impl WaveTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, from: NodeId, to: NodeId, direction: Direction, message: &Tensor2) {
        self.entries.push(Transmission {
            from,
            to,
            direction,
            samples: message.rows(),
            scalars: message.len() as u64,
        });
    }

    /// Sorted, deduplicated edges seen in one direction.
    pub fn edges(&self, direction: Direction) -> Vec<(NodeId, NodeId)> {
        let mut edges: Vec<_> = self
            .entries
            .iter()
            .filter(|t| t.direction == direction)
            .map(|t| (t.from, t.to))
            .collect();
        edges.sort();
        edges.dedup();
        edges
    }

    pub fn scalars(&self, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|t| t.direction == direction)
            .map(|t| t.scalars)
            .sum()
    }

    pub fn total_scalars(&self) -> u64 {
        self.entries.iter().map(|t| t.scalars).sum()
    }

    /// Bits on the wire when each scalar takes `bits_per_scalar` bits.
    pub fn bits(&self, bits_per_scalar: u32) -> u64 {
        self.total_scalars() * u64::from(bits_per_scalar)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Per-sensor inputs and labels for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indexed like `TrainingTopology::data_nodes`.
    pub inputs: Vec<Tensor2>,
    /// `n x 1`, entries in {0, 1}.
    pub labels: Tensor2,
}

impl Batch {
    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Self {
        let inputs = (0..data.sensors)
            .map(|j| {
                Tensor2::from_fn(indices.len(), data.obs_dim, |r, c| {
                    data.samples[indices[r]].observations[j][c]
                })
            })
            .collect();
        let labels = Tensor2::from_fn(indices.len(), 1, |r, _| {
            f64::from(data.samples[indices[r]].label)
        });
        Self { inputs, labels }
    }

    pub fn full(data: &Dataset) -> Self {
        let all: Vec<usize> = (0..data.len()).collect();
        Self::from_dataset(data, &all)
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor2,
    /// Per-sample KL of each sensor's message, in nats, keyed by sensor id.
    pub kl: Vec<(NodeId, Vec<f64>)>,
}

impl ForwardOutput {
    /// Mean over samples of the KL summed over sensors.
    pub fn rate(&self) -> f64 {
        self.kl
            .iter()
            .map(|(_, v)| v.iter().sum::<f64>() / v.len().max(1) as f64)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub nll: f64,
    pub rate: f64,
    /// `nll + rate_weight * rate`.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Percent of correct sign predictions.
    pub accuracy: f64,
    pub nll: f64,
    /// Mean per-sample KL summed over sensors, nats.
    pub rate: f64,
}

/// Node modules wired onto one training topology.
#[derive(Debug, Clone)]
pub struct InlModel {
    topology: TrainingTopology,
    arch: Architecture,
    /// Nodes that take part in the waves, in topological order.
    order: Vec<NodeId>,
    /// Position of each sensor in `topology.data_nodes()`.
    data_index: Vec<Option<usize>>,
    modules: Vec<Option<NodeModule>>,
    outputs: Vec<Option<Tensor2>>,
    pending_forward: bool,
}

impl InlModel {
    /// Builds and initialises modules for every node on the topology.
    ///
    /// `seed_key` identifies the run; each node draws its initial weights and
    /// gate noise from streams derived from it and the node id.
    pub fn new(
        topology: TrainingTopology,
        arch: Architecture,
        seed_key: &[u64],
    ) -> Result<Self, EngineError> {
        topology.check_connected()?;
        let n = topology.node_count();
        let fusion = topology.fusion();
        let reaches = topology.reaches_fusion();
        let active = topology.active_nodes();

        for e in topology.edges() {
            if e.width as usize != arch.message_width {
                return Err(EngineError::Unsupported(format!(
                    "edge {}->{} has width {}, modules emit {} scalars",
                    e.from, e.to, e.width, arch.message_width
                )));
            }
        }
        if topology.parents(fusion).is_empty() {
            return Err(EngineError::Unsupported(
                "fusion node has no active parents".into(),
            ));
        }

        let mut data_index = vec![None; n];
        for (k, &j) in topology.data_nodes().iter().enumerate() {
            data_index[j.index()] = Some(k);
        }

        let mut modules: Vec<Option<NodeModule>> = vec![None; n];
        for &v in &active {
            if !reaches[v.index()] {
                return Err(EngineError::Unsupported(format!(
                    "node {v} carries active edges but cannot reach the fusion node"
                )));
            }
            let parents = topology.parents(v);
            let mut init = rng::stream(&key_with(seed_key, &[purpose::INIT, v.index() as u64]));
            let module = if v == fusion {
                let width = parents.len() * arch.message_width;
                NodeModule::Fusion(FusionModule {
                    hidden: DenseLayer::new(width, arch.fusion_hidden, Activation::Tanh, &mut init),
                    output: DenseLayer::new(arch.fusion_hidden, 1, Activation::Identity, &mut init),
                })
            } else if data_index[v.index()].is_some() {
                if !parents.is_empty() {
                    return Err(EngineError::Unsupported(format!(
                        "sensor {v} has active incoming edges"
                    )));
                }
                NodeModule::Sensor(SensorModule {
                    encoder: DenseLayer::new(
                        arch.obs_dim,
                        arch.sensor_hidden,
                        Activation::Tanh,
                        &mut init,
                    ),
                    mu_head: DenseLayer::new(
                        arch.sensor_hidden,
                        arch.message_width,
                        Activation::Identity,
                        &mut init,
                    ),
                    logvar_head: DenseLayer::new(
                        arch.sensor_hidden,
                        arch.message_width,
                        Activation::Identity,
                        &mut init,
                    ),
                    gate: GaussianGate::new(),
                    noise: rng::stream(&key_with(
                        seed_key,
                        &[purpose::GATE_NOISE, v.index() as u64],
                    )),
                })
            } else {
                if parents.is_empty() {
                    return Err(EngineError::Unsupported(format!(
                        "relay {v} has no active parents"
                    )));
                }
                NodeModule::Relay(RelayModule {
                    hidden: DenseLayer::new(
                        arch.message_width,
                        arch.relay_hidden,
                        Activation::Tanh,
                        &mut init,
                    ),
                    output: DenseLayer::new(
                        arch.relay_hidden,
                        arch.message_width,
                        Activation::Identity,
                        &mut init,
                    ),
                })
            };
            modules[v.index()] = Some(module);
        }

        let order = topological_order(&topology, &active);
        Ok(Self {
            topology,
            arch,
            order,
            data_index,
            modules,
            outputs: vec![None; n],
            pending_forward: false,
        })
    }

    pub fn topology(&self) -> &TrainingTopology {
        &self.topology
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Nodes taking part in the waves, in processing order.
    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn module(&self, v: NodeId) -> Option<&NodeModule> {
        self.modules[v.index()].as_ref()
    }

    /// Trainable scalars over the modules on the topology.
    pub fn count_params(&self) -> usize {
        self.modules
            .iter()
            .flatten()
            .map(Trainable::param_count)
            .sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), EngineError> {
        let sensors = self.topology.data_nodes().len();
        let dim = batch
            .inputs
            .first()
            .map_or(self.arch.obs_dim, Tensor2::cols);
        if batch.inputs.len() != sensors || dim != self.arch.obs_dim {
            return Err(EngineError::DatasetMismatch {
                sensors,
                dim: self.arch.obs_dim,
                got_sensors: batch.inputs.len(),
                got_dim: dim,
            });
        }
        if batch.is_empty() {
            return Err(EngineError::EmptyDataset);
        }
        Ok(())
    }

    /// Activation wave. With `train` set, layers cache for the backward wave
    /// and gates sample noise; otherwise gates emit their mean.
    pub fn forward_wave(
        &mut self,
        batch: &Batch,
        train: bool,
        trace: &mut WaveTrace,
    ) -> Result<ForwardOutput, EngineError> {
        self.check_batch(batch)?;
        self.topology.check_connected()?;
        self.pending_forward = false;
        let mut kl = Vec::new();
        let mut logits = None;

        for &v in &self.order {
            let parents = self.topology.parents(v);
            let module = self.modules[v.index()]
                .as_mut()
                .expect("every ordered node has a module");
            let message = match module {
                NodeModule::Sensor(m) => {
                    let k = self.data_index[v.index()].expect("sensor has a data slot");
                    let x = &batch.inputs[k];
                    let h = layer_pass(&mut m.encoder, x, train)?;
                    let mu = layer_pass(&mut m.mu_head, &h, train)?;
                    let logvar = layer_pass(&mut m.logvar_head, &h, train)?;
                    let gated = if train {
                        m.gate.forward(&mu, &logvar, &mut m.noise)?
                    } else {
                        GaussianGate::infer(&mu, &logvar)?
                    };
                    kl.push((v, gated.kl_per_sample));
                    gated.message
                }
                NodeModule::Relay(m) => {
                    let mut mean = Tensor2::zeros(batch.len(), self.arch.message_width);
                    for p in parents {
                        mean.add_assign(self.outputs[p.index()].as_ref().expect("parent ran"))?;
                    }
                    mean.scale(1.0 / parents.len() as f64);
                    let h = layer_pass(&mut m.hidden, &mean, train)?;
                    layer_pass(&mut m.output, &h, train)?
                }
                NodeModule::Fusion(m) => {
                    let inputs: Vec<&Tensor2> = parents
                        .iter()
                        .map(|p| self.outputs[p.index()].as_ref().expect("parent ran"))
                        .collect();
                    let x = Tensor2::hcat(&inputs)?;
                    let h = layer_pass(&mut m.hidden, &x, train)?;
                    logits = Some(layer_pass(&mut m.output, &h, train)?);
                    continue;
                }
            };
            for &c in self.topology.children(v) {
                trace.record(v, c, Direction::Forward, &message);
            }
            self.outputs[v.index()] = Some(message);
        }

        self.pending_forward = train;
        Ok(ForwardOutput {
            logits: logits.expect("fusion node is always ordered"),
            kl,
        })
    }

    /// Error wave from the fusion node back to the sensors.
    ///
    /// `d_logits` is the task-loss error at the fusion output; `rate_weight`
    /// scales the batch-mean KL term added at every gate.
    pub fn backward_wave(
        &mut self,
        d_logits: &Tensor2,
        rate_weight: f64,
        trace: &mut WaveTrace,
    ) -> Result<(), EngineError> {
        if !self.pending_forward {
            return Err(EngineError::NoForward);
        }
        self.pending_forward = false;
        let n = self.topology.node_count();
        let width = self.arch.message_width;
        let mut errors: Vec<Option<Tensor2>> = vec![None; n];

        for &v in self.order.iter().rev() {
            let parents = self.topology.parents(v);
            let module = self.modules[v.index()]
                .as_mut()
                .expect("every ordered node has a module");
            match module {
                NodeModule::Fusion(m) => {
                    let d = m.output.backward(d_logits)?;
                    let d = m.hidden.backward(&d)?;
                    for (k, &p) in parents.iter().enumerate() {
                        let chunk = d.columns(k * width, width);
                        trace.record(p, v, Direction::Backward, &chunk);
                        accumulate(&mut errors[p.index()], chunk)?;
                    }
                }
                NodeModule::Relay(m) => {
                    let err = errors[v.index()].take().expect("relay received errors");
                    let d = m.output.backward(&err)?;
                    let mut d = m.hidden.backward(&d)?;
                    d.scale(1.0 / parents.len() as f64);
                    for &p in parents {
                        trace.record(p, v, Direction::Backward, &d);
                        accumulate(&mut errors[p.index()], d.clone())?;
                    }
                }
                NodeModule::Sensor(m) => {
                    let err = errors[v.index()].take().expect("sensor received errors");
                    let (d_mu, d_logvar) = m.gate.backward(&err, rate_weight)?;
                    let mut d_h = m.mu_head.backward(&d_mu)?;
                    d_h.add_assign(&m.logvar_head.backward(&d_logvar)?)?;
                    m.encoder.backward(&d_h)?;
                }
            }
        }
        Ok(())
    }

    /// Forward wave, loss, and backward wave. Gradients accumulate into the
    /// modules; no parameter update happens here.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        rate_weight: f64,
        trace: &mut WaveTrace,
    ) -> Result<StepOutput, EngineError> {
        let out = self.forward_wave(batch, true, trace)?;
        let (nll, d_logits) = bce_with_logits(&out.logits, &batch.labels)?;
        let rate = out.rate();
        self.backward_wave(&d_logits, rate_weight, trace)?;
        Ok(StepOutput {
            nll,
            rate,
            objective: nll + rate_weight * rate,
        })
    }

    /// Objective of one stochastic forward pass, without touching gradients.
    pub fn objective(&mut self, batch: &Batch, rate_weight: f64) -> Result<f64, EngineError> {
        let out = self.forward_wave(batch, true, &mut WaveTrace::new())?;
        self.pending_forward = false;
        let (nll, _) = bce_with_logits(&out.logits, &batch.labels)?;
        Ok(nll + rate_weight * out.rate())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    /// Deterministic metrics on a dataset: gates emit their mean.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<EvalMetrics, EngineError> {
        if data.is_empty() {
            return Err(EngineError::EmptyDataset);
        }
        let batch = Batch::full(data);
        let out = self.forward_wave(&batch, false, &mut WaveTrace::new())?;
        let (nll, _) = bce_with_logits(&out.logits, &batch.labels)?;
        let correct = out
            .logits
            .data()
            .iter()
            .zip(batch.labels.data())
            .filter(|(&z, &y)| (sigmoid(z) > 0.5) == (y > 0.5))
            .count();
        Ok(EvalMetrics {
            accuracy: 100.0 * correct as f64 / batch.len() as f64,
            nll,
            rate: out.rate(),
        })
    }
}

impl Trainable for InlModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for &v in &self.order {
            if let Some(m) = self.modules[v.index()].as_mut() {
                m.visit_params(f);
            }
        }
    }

    fn param_count(&self) -> usize {
        self.count_params()
    }
}

fn key_with(base: &[u64], extra: &[u64]) -> Vec<u64> {
    base.iter().chain(extra).copied().collect()
}

fn layer_pass(layer: &mut DenseLayer, x: &Tensor2, train: bool) -> Result<Tensor2, NnError> {
    if train {
        layer.forward(x)
    } else {
        layer.infer(x)
    }
}

fn accumulate(slot: &mut Option<Tensor2>, t: Tensor2) -> Result<(), NnError> {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

/// Kahn order over the active nodes, smallest id first among ready nodes.
fn topological_order(t: &TrainingTopology, active: &[NodeId]) -> Vec<NodeId> {
    let mut indegree = vec![0usize; t.node_count()];
    for e in t.edges() {
        indegree[e.to.index()] += 1;
    }
    let mut ready: std::collections::BTreeSet<NodeId> = active
        .iter()
        .copied()
        .filter(|v| indegree[v.index()] == 0)
        .collect();
    let mut order = Vec::with_capacity(active.len());
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &c in t.children(v) {
            indegree[c.index()] -= 1;
            if indegree[c.index()] == 0 {
                ready.insert(c);
            }
        }
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    /// Keep the parameters after the last epoch.
    Final,
    /// Keep the parameters of the evaluated epoch with the lowest validation
    /// objective `nll + rate_weight * rate`.
    BestValidation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the KL rate term.
    pub rate_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub bits_per_scalar: u32,
    pub selection: ModelSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            rate_weight: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 1,
            bits_per_scalar: 32,
            selection: ModelSelection::BestValidation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.epochs == 0 {
            return Err(EngineError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EngineError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.rate_weight.is_finite() && self.rate_weight >= 0.0) {
            return Err(EngineError::InvalidConfig(format!(
                "rate_weight = {} must be >= 0",
                self.rate_weight
            )));
        }
        if self.selection == ModelSelection::BestValidation && self.eval_every == 0 {
            return Err(EngineError::InvalidConfig(
                "best-validation selection needs eval_every >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's mini-batches.
    pub train_nll: f64,
    pub train_rate: f64,
    /// Bits sent during this epoch, forward plus backward.
    pub bits: u64,
    pub cumulative_bits: u64,
    pub val: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters the model holds after training (1-based).
    pub selected_epoch: usize,
}

/// What the observer of [`train_observed`] sees after every optimizer step.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub epoch: usize,
    pub step: usize,
    pub output: &'a StepOutput,
    pub trace: &'a WaveTrace,
}

pub fn train(
    model: &mut InlModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport, EngineError> {
    train_observed(model, train_set, val_set, config, &mut |_| {})
}

/// Mini-batch Adam on `nll + rate_weight * rate`, reporting each step.
pub fn train_observed(
    model: &mut InlModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<TrainReport, EngineError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let mut shuffle = rng::stream(&[purpose::SHUFFLE, config.seed]);
    let mut optimizer = Adam::new(config.adam);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut cumulative_bits = 0;
    let mut best: Option<(f64, usize, InlModel)> = None;
    let mut trace = WaveTrace::new();
    model.zero_grad();

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut shuffle);
        let (mut nll_sum, mut rate_sum, mut bits) = (0.0, 0.0, 0);
        for (step, chunk) in indices.chunks(config.batch_size).enumerate() {
            let batch = Batch::from_dataset(train_set, chunk);
            trace.clear();
            let out = model.train_step(&batch, config.rate_weight, &mut trace)?;
            if !out.objective.is_finite() {
                return Err(EngineError::NonFinite {
                    epoch,
                    step,
                    value: out.objective,
                });
            }
            optimizer.step(model)?;
            nll_sum += out.nll * chunk.len() as f64;
            rate_sum += out.rate * chunk.len() as f64;
            bits += trace.bits(config.bits_per_scalar);
            observer(&StepRecord {
                epoch,
                step,
                output: &out,
                trace: &trace,
            });
        }
        cumulative_bits += bits;
        let val = if config.eval_every > 0 && epoch % config.eval_every == 0 && !val_set.is_empty()
        {
            Some(model.evaluate(val_set)?)
        } else {
            None
        };
        if let (ModelSelection::BestValidation, Some(m)) = (config.selection, val) {
            let objective = m.nll + config.rate_weight * m.rate;
            if best.as_ref().is_none_or(|(b, _, _)| objective < *b) {
                best = Some((objective, epoch, model.clone()));
            }
        }
        let n = train_set.len() as f64;
        epochs.push(EpochMetrics {
            epoch,
            train_nll: nll_sum / n,
            train_rate: rate_sum / n,
            bits,
            cumulative_bits,
            val,
        });
    }

    let mut selected_epoch = config.epochs;
    if let Some((_, epoch, snapshot)) = best {
        *model = snapshot;
        selected_epoch = epoch;
    }
    Ok(TrainReport {
        epochs,
        selected_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        build_spt, exchange_bits, full_topology, paper_topology, Edge, EdgeAttr, NetworkGraph,
        NodeRole,
    };
    use crate::task::{generate, DistributedSample, TaskSpec};

    fn link(from: usize, to: usize) -> Edge {
        Edge {
            from: NodeId(from),
            to: NodeId(to),
            attr: EdgeAttr {
                capacity: 1.0,
                latency: 0.0,
                reliability: 1.0,
                width: 3,
            },
        }
    }

    fn single_sensor_graph() -> NetworkGraph {
        NetworkGraph::new(vec![NodeRole::Sensor, NodeRole::Fusion], vec![link(0, 1)]).unwrap()
    }

    fn separable_data(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let x = (i as f64 / n as f64) * 4.0 - 2.0 + 0.01;
                let y = ((i * 7) % 5) as f64 / 5.0 - 0.5;
                DistributedSample {
                    observations: vec![vec![x, y]],
                    label: u8::from(x > 0.0),
                }
            })
            .collect();
        Dataset {
            sensors: 1,
            obs_dim: 2,
            samples,
        }
    }

    #[test]
    fn single_link_trace() {
        let g = single_sensor_graph();
        let mut model = InlModel::new(full_topology(&g), Architecture::default(), &[0]).unwrap();
        let batch = Batch::full(&separable_data(10));
        let mut trace = WaveTrace::new();
        model.train_step(&batch, 0.0, &mut trace).unwrap();
        assert_eq!(trace.entries.len(), 2);
        assert_eq!(trace.entries[0].direction, Direction::Forward);
        assert_eq!(trace.entries[0].samples, 10);
        assert_eq!(trace.scalars(Direction::Forward), 30);
        assert_eq!(trace.scalars(Direction::Backward), 30);
    }

    #[test]
    fn reference_scalar_counts() {
        let (g, w) = paper_topology();
        let (_, splits) = generate(&TaskSpec::default()).unwrap();
        let batch = Batch::full(&splits.train);
        for (topology, per_direction) in [
            (build_spt(&g, &w).unwrap(), 2880),
            (full_topology(&g), 9720),
        ] {
            let mut model = InlModel::new(topology, Architecture::default(), &[1]).unwrap();
            let mut trace = WaveTrace::new();
            model.train_step(&batch, 0.1, &mut trace).unwrap();
            assert_eq!(trace.scalars(Direction::Forward), per_direction);
            assert_eq!(trace.scalars(Direction::Backward), per_direction);
        }
    }

    #[test]
    fn zero_error_still_transmits() {
        let (g, w) = paper_topology();
        let spt = build_spt(&g, &w).unwrap();
        let (_, splits) = generate(&TaskSpec::default()).unwrap();
        let batch = Batch::full(&splits.train);
        let mut model = InlModel::new(spt.clone(), Architecture::default(), &[2]).unwrap();
        let mut trace = WaveTrace::new();
        model.forward_wave(&batch, true, &mut trace).unwrap();
        model
            .backward_wave(&Tensor2::zeros(batch.len(), 1), 0.0, &mut trace)
            .unwrap();
        let mut grads_zero = true;
        model.visit_params(&mut |_, g| grads_zero &= g.iter().all(|&x| x == 0.0));
        assert!(grads_zero);
        assert_eq!(trace.edges(Direction::Backward).len(), spt.len());
        assert_eq!(trace.bits(32), exchange_bits(&spt, 32, 120));
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut model = InlModel::new(
            full_topology(&single_sensor_graph()),
            Architecture::default(),
            &[0],
        )
        .unwrap();
        let err = model.backward_wave(&Tensor2::zeros(1, 1), 0.0, &mut WaveTrace::new());
        assert_eq!(err, Err(EngineError::NoForward));
        let data = separable_data(4);
        model.evaluate(&data).unwrap();
        let err = model.backward_wave(&Tensor2::zeros(4, 1), 0.0, &mut WaveTrace::new());
        assert_eq!(err, Err(EngineError::NoForward));
    }

    #[test]
    fn separable_data_is_learned() {
        let g = single_sensor_graph();
        let mut model = InlModel::new(full_topology(&g), Architecture::default(), &[5]).unwrap();
        let data = separable_data(64);
        let config = TrainConfig {
            epochs: 200,
            eval_every: 0,
            selection: ModelSelection::Final,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &data, &config).unwrap();
        assert_eq!(model.evaluate(&data).unwrap().accuracy, 100.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let (g, w) = paper_topology();
        let (_, splits) = generate(&TaskSpec::default()).unwrap();
        let mut model =
            InlModel::new(build_spt(&g, &w).unwrap(), Architecture::default(), &[3]).unwrap();
        let m = model.evaluate(&splits.test).unwrap();
        assert!((30.0..=70.0).contains(&m.accuracy), "{m:?}");
        assert!((m.nll - std::f64::consts::LN_2).abs() < 0.15, "{m:?}");
    }

    #[test]
    fn param_counts() {
        let (g, w) = paper_topology();
        let arch = Architecture::default();
        let dense = InlModel::new(full_topology(&g), arch, &[0]).unwrap();
        let spt = InlModel::new(build_spt(&g, &w).unwrap(), arch, &[0]).unwrap();
        // sensor 6 * (48 + 51 + 51), relay 32 + 27, fusion (3P*16 + 16) + 17
        assert_eq!(dense.count_params(), 6 * 150 + 3 * 59 + (27 * 16 + 16) + 17);
        assert_eq!(spt.count_params(), 6 * 150 + 2 * 59 + (6 * 16 + 16) + 17);
        assert!(spt.count_params() < dense.count_params());

        let wide = Architecture {
            fusion_hidden: 32,
            ..arch
        };
        let spt_wide = InlModel::new(build_spt(&g, &w).unwrap(), wide, &[0]).unwrap();
        // hidden grows by (in + 1) * 16, output by 16
        assert_eq!(
            spt_wide.count_params() - spt.count_params(),
            (6 + 1) * 16 + 16
        );
    }

    #[test]
    fn rejects_bad_topologies() {
        // Relay 1 is a dead end.
        let g = NetworkGraph::new(
            vec![NodeRole::Sensor, NodeRole::Relay, NodeRole::Fusion],
            vec![link(0, 1), link(0, 2)],
        )
        .unwrap();
        assert!(matches!(
            InlModel::new(full_topology(&g), Architecture::default(), &[0]),
            Err(EngineError::Unsupported(_))
        ));
        // Width mismatch.
        let arch = Architecture {
            message_width: 4,
            ..Architecture::default()
        };
        assert!(matches!(
            InlModel::new(full_topology(&single_sensor_graph()), arch, &[0]),
            Err(EngineError::Unsupported(_))
        ));
    }

    #[test]
    fn dataset_mismatch_and_empty() {
        let mut model = InlModel::new(
            full_topology(&single_sensor_graph()),
            Architecture::default(),
            &[0],
        )
        .unwrap();
        let (_, splits) = generate(&TaskSpec::default()).unwrap();
        assert!(matches!(
            model.evaluate(&splits.val),
            Err(EngineError::DatasetMismatch { .. })
        ));
        let empty = Dataset {
            sensors: 1,
            obs_dim: 2,
            samples: vec![],
        };
        assert_eq!(model.evaluate(&empty), Err(EngineError::EmptyDataset));
    }

    #[test]
    fn invalid_train_config() {
        let cfg = TrainConfig {
            rate_weight: -0.1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
