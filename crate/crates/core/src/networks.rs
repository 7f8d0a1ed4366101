//! Small classifier networks: construction, training, evaluation and
//! checkpoint persistence.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, GraphBuilder, LossKind};
use crate::kernels::{Conv2dParams, Pool2dParams};
use crate::search_space::{CellSpec, Skeleton};
use crate::tasks::{Samples, Task};
use crate::tensor::{one_hot, Tensor, TensorMap};

/// Seeded He-normal initializer, consumed in parameter declaration order.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let dist = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    pub fn kernel(&mut self, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Tensor {
        self.normal(&[out_c, in_c, kh, kw], in_c * kh * kw)
    }

    pub fn dense(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(&[fan_in, fan_out], fan_in)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetworkKind {
    /// Flatten, then `relu(linear)` per hidden width, then a linear head.
    Mlp {
        hidden: Vec<usize>,
    },
    /// Per width: 3x3 conv, relu, 2x2 max-pool (while the map is ≥ 2 wide);
    /// then flatten and a linear head.
    SmallConv {
        channels: Vec<usize>,
    },
    CellNetwork {
        skeleton: Skeleton,
        cell: CellSpec,
    },
}

/// Architecture description. Equal specs are structurally similar: they
/// build identical parameter name/shape sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            NetworkKind::Mlp { hidden } => write!(f, "mlp hidden={}", join(hidden, ","))?,
            NetworkKind::SmallConv { channels } => write!(f, "small_conv channels={}", join(channels, ","))?,
            NetworkKind::CellNetwork { skeleton, cell } => {
                write!(f, "cell_network [{}] cell={}", skeleton.describe(), cell.compact())?
            }
        }
        write!(
            f,
            " input={} classes={}",
            join(&self.input_shape, "x"),
            self.num_classes
        )
    }
}

impl NetworkSpec {
    /// Parses names like `mlp-2x64` (two hidden layers of 64) and
    /// `conv-2x16` (two 16-channel conv blocks).
    pub fn from_name(name: &str, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "unknown network name {name:?} (expected mlp-<L>x<W> or conv-<L>x<C>)"
            ))
        };
        let (family, dims) = name.split_once('-').ok_or_else(bad)?;
        let (layers, width) = dims.split_once('x').ok_or_else(bad)?;
        let layers: usize = layers.parse().map_err(|_| bad())?;
        let width: usize = width.parse().map_err(|_| bad())?;
        let kind = match family {
            "mlp" => NetworkKind::Mlp {
                hidden: vec![width; layers],
            },
            "conv" => NetworkKind::SmallConv {
                channels: vec![width; layers],
            },
            _ => return Err(bad()),
        };
        let spec = Self {
            kind,
            input_shape: input_shape.to_vec(),
            num_classes,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid input shape {:?}", self.input_shape)));
        }
        let widths = match &self.kind {
            NetworkKind::Mlp { hidden } => hidden.as_slice(),
            NetworkKind::SmallConv { channels } => {
                if self.input_shape.len() != 3 {
                    return Err(Error::shape(format!(
                        "small_conv needs [C, H, W] inputs, got {:?}",
                        self.input_shape
                    )));
                }
                channels.as_slice()
            }
            NetworkKind::CellNetwork { skeleton, .. } => std::slice::from_ref(&skeleton.stem_channels),
        };
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("all widths must be at least 1"));
        }
        Ok(())
    }

    /// Stable text used for checkpoint digests.
    pub fn canonical(&self) -> String {
        self.to_string()
    }

    pub fn digest(&self) -> [u8; 32] {
        let d = Sha256::digest(self.canonical().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(d.as_slice());
        out
    }

    /// Builds a cross-entropy graph with parameters drawn from `seed`.
    pub fn build_graph(&self, seed: u64) -> Result<ComputeGraph> {
        self.check()?;
        let mut init = ParamInit::new(seed);
        let mut b = GraphBuilder::new(&self.input_shape);
        let logits = match &self.kind {
            NetworkKind::Mlp { hidden } => {
                let mut x = b.flatten(b.input())?;
                let mut width = b.shape_of(x)[0];
                for (i, &h) in hidden.iter().enumerate() {
                    let w = b.param(&format!("fc{i}.w"), init.dense(width, h))?;
                    let bias = b.param(&format!("fc{i}.b"), init.zeros(&[h]))?;
                    let y = b.matmul(x, w)?;
                    let y = b.add_bias(y, bias)?;
                    x = b.relu(y)?;
                    width = h;
                }
                let w = b.param("head.w", init.dense(width, self.num_classes))?;
                let bias = b.param("head.b", init.zeros(&[self.num_classes]))?;
                let y = b.matmul(x, w)?;
                b.add_bias(y, bias)?
            }
            NetworkKind::SmallConv { channels } => {
                let mut x = b.input();
                let mut c_in = self.input_shape[0];
                for (i, &c) in channels.iter().enumerate() {
                    let k = b.param(&format!("conv{i}.k"), init.kernel(c, c_in, 3, 3))?;
                    let bias = b.param(&format!("conv{i}.b"), init.zeros(&[c]))?;
                    let y = b.conv2d(
                        x,
                        k,
                        Conv2dParams {
                            stride: 1,
                            pad_h: 1,
                            pad_w: 1,
                            dilation: 1,
                        },
                    )?;
                    let y = b.add_bias(y, bias)?;
                    x = b.relu(y)?;
                    let s = b.shape_of(x);
                    if s[1] >= 2 && s[2] >= 2 {
                        x = b.max_pool2d(
                            x,
                            Pool2dParams {
                                size: 2,
                                stride: 2,
                                padding: 0,
                            },
                        )?;
                    }
                    c_in = c;
                }
                let x = b.flatten(x)?;
                let width = b.shape_of(x)[0];
                let w = b.param("head.w", init.dense(width, self.num_classes))?;
                let bias = b.param("head.b", init.zeros(&[self.num_classes]))?;
                let y = b.matmul(x, w)?;
                b.add_bias(y, bias)?
            }
            NetworkKind::CellNetwork { skeleton, cell } => {
                skeleton.build(&mut b, Some(cell), self.num_classes, &mut init)?
            }
        };
        b.build(logits, LossKind::CrossEntropy)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.build_graph(0)?.num_params())
    }
}

/// The skeleton alone (no cells), as a cross-entropy graph.
pub fn build_skeleton_graph(
    skeleton: &Skeleton,
    input_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<ComputeGraph> {
    let mut init = ParamInit::new(seed);
    let mut b = GraphBuilder::new(input_shape);
    let logits = skeleton.build(&mut b, None, num_classes, &mut init)?;
    b.build(logits, LossKind::CrossEntropy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Learning rate `lr / (1 + lr_decay * epoch)`.
    Sgd {
        lr: f64,
        momentum: f64,
        lr_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd {
            lr,
            momentum: 0.0,
            lr_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Seed for the per-epoch shuffle of training samples.
    pub batch_order_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(1e-3),
            epochs: 30,
            batch_size: 32,
            seed: 0,
            batch_order_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        let lr = match self.optimizer {
            Optimizer::Sgd { lr, momentum, lr_decay } => {
                if !(0.0..1.0).contains(&momentum) || lr_decay < 0.0 {
                    return Err(Error::invalid("momentum must be in [0, 1) and lr_decay >= 0"));
                }
                lr
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
                }
                lr
            }
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    first: Option<TensorMap>,
    second: Option<TensorMap>,
    steps: u64,
    epoch: usize,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            first: None,
            second: None,
            steps: 0,
            epoch: 0,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Applies one descent step to `params` in place.
    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) {
        self.steps += 1;
        let zeros =
            |m: &TensorMap| -> TensorMap { m.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect() };
        match self.optimizer {
            Optimizer::Sgd { lr, momentum, lr_decay } => {
                let lr = lr / (1.0 + lr_decay * self.epoch as f64);
                if momentum == 0.0 {
                    for (p, g) in params.values_mut().zip(grads.values()) {
                        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *pv -= lr * gv;
                        }
                    }
                } else {
                    let vel = self.first.get_or_insert_with(|| zeros(params));
                    for ((p, g), v) in params.values_mut().zip(grads.values()).zip(vel.values_mut()) {
                        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                            *vv = momentum * *vv + gv;
                            *pv -= lr * *vv;
                        }
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                if self.first.is_none() {
                    self.first = Some(zeros(params));
                    self.second = Some(zeros(params));
                }
                let (m, v) = (self.first.as_mut().unwrap(), self.second.as_mut().unwrap());
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), mt), vt) in params
                    .values_mut()
                    .zip(grads.values())
                    .zip(m.values_mut())
                    .zip(v.values_mut())
                {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mt.data_mut())
                        .zip(vt.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Shuffled minibatch index lists, one epoch at a time.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    n: usize,
    batch_size: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch_size: batch_size.max(1),
        }
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// Sample-weighted mean of the minibatch losses seen during the epoch.
    pub loss: f64,
    /// Training accuracy of the minibatch predictions made during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNetwork {
    pub spec: NetworkSpec,
    pub params: TensorMap,
    pub log: Vec<EpochLog>,
}

impl TrainedNetwork {
    /// A graph carrying these parameters.
    pub fn graph(&self) -> Result<ComputeGraph> {
        let mut g = self.spec.build_graph(0)?;
        g.set_params(self.params.clone())?;
        Ok(g)
    }
}

/// Index of the largest of the first `k` entries (first wins ties).
pub fn argmax_prefix(row: &[f64], k: usize) -> usize {
    let mut best = 0;
    for j in 1..k.min(row.len()) {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Predicted class per sample, restricted to the first `num_classes` logits.
pub fn predict_classes(graph: &ComputeGraph, inputs: &Tensor, num_classes: usize) -> Result<Vec<usize>> {
    let n = inputs.batch_size();
    let mut out = Vec::with_capacity(n);
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let logits = graph.predict(&inputs.slice_batch(start, end))?;
        let width = logits.sample_shape()[0];
        out.extend(logits.data().chunks(width).map(|r| argmax_prefix(r, num_classes)));
        start = end;
    }
    Ok(out)
}

/// Trains `graph` in place on `data` with targets one-hot over the graph's
/// output width. Returns one log entry per epoch.
pub fn train_graph(graph: &mut ComputeGraph, data: &Samples, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("training split is empty".into()));
    }
    let width = graph.output_shape()[0];
    let targets = one_hot(&data.labels, width)?;
    let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.batch_order_seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in schedule.next_epoch() {
            let x = data.inputs.gather(&batch);
            let y = targets.gather(&batch);
            let loss = match graph.forward(&x, &y) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let grads = match graph.backward() {
                Ok(g) => g,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss }),
                Err(e) => return Err(e),
            };
            loss_sum += loss * batch.len() as f64;
            // The forward above cached the logits; re-derive predictions from them.
            hits += batch_hits(graph, &x, &batch, &data.labels, width)?;
            opt.step(graph.params_mut(), &grads);
            if graph.params().values().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
        }
        log.push(EpochLog {
            loss: loss_sum / data.len() as f64,
            accuracy: hits as f64 / data.len() as f64,
        });
    }
    Ok(log)
}

fn batch_hits(graph: &ComputeGraph, x: &Tensor, batch: &[usize], labels: &[usize], width: usize) -> Result<usize> {
    let logits = graph.predict(x)?;
    Ok(logits
        .data()
        .chunks(width)
        .zip(batch)
        .filter(|(row, &i)| argmax_prefix(row, width) == labels[i])
        .count())
}

/// Trains a fresh network of `spec` on the task's training split.
pub fn train(spec: &NetworkSpec, task: &Task, cfg: &TrainConfig) -> Result<TrainedNetwork> {
    if spec.input_shape != task.input_shape() {
        return Err(Error::shape(format!(
            "spec input {:?} vs task input {:?}",
            spec.input_shape,
            task.input_shape()
        )));
    }
    if spec.num_classes < task.num_classes {
        return Err(Error::shape(format!(
            "spec has {} outputs, task {} needs {}",
            spec.num_classes, task.name, task.num_classes
        )));
    }
    let mut graph = spec.build_graph(cfg.seed)?;
    let log = train_graph(&mut graph, &task.data.train, cfg)?;
    Ok(TrainedNetwork {
        spec: spec.clone(),
        params: graph.params().clone(),
        log,
    })
}

/// Test-split accuracy. Networks may have a wider head than the task; only
/// the task's first `num_classes` logits compete.
pub fn performance(net: &TrainedNetwork, task: &Task) -> Result<f64> {
    if net.spec.num_classes < task.num_classes {
        return Err(Error::shape(format!(
            "network has {} outputs, task {} needs {}",
            net.spec.num_classes, task.name, task.num_classes
        )));
    }
    if net.spec.input_shape != task.input_shape() {
        return Err(Error::shape(format!(
            "network input {:?} vs task input {:?}",
            net.spec.input_shape,
            task.input_shape()
        )));
    }
    let graph = net.graph()?;
    let preds = predict_classes(&graph, &task.data.test.inputs, task.num_classes)?;
    Ok(accuracy(&preds, &task.data.test.labels))
}

/// `performance >= 1 - epsilon` for `0 < epsilon < 1`.
pub fn meets_epsilon(performance: f64, epsilon: f64) -> Result<bool> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1)")));
    }
    Ok(performance >= 1.0 - epsilon)
}

pub fn is_epsilon_approx(net: &TrainedNetwork, task: &Task, epsilon: f64) -> Result<bool> {
    meets_epsilon(1.0, epsilon)?;
    meets_epsilon(performance(net, task)?, epsilon)
}

const CHECKPOINT_TAG: &[u8; 8] = b"TDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header (tag, version, spec digest), parameter tensors in declaration
/// order as little-endian `f64`, then the training log.
pub fn encode_checkpoint(net: &TrainedNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_TAG);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.spec.digest());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for (name, t) in &net.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(net.log.len() as u32).to_le_bytes());
    for e in &net.log {
        out.extend_from_slice(&e.loss.to_le_bytes());
        out.extend_from_slice(&e.accuracy.to_le_bytes());
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], expected: &NetworkSpec) -> Result<TrainedNetwork> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_TAG {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    if r.take(32)? != expected.digest() {
        return Err(Error::SpecMismatch(format!(
            "checkpoint was not written for {expected}"
        )));
    }
    let reference = expected.build_graph(0)?;
    let count = r.u32()? as usize;
    if count != reference.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors, spec declares {}",
            reference.params().len()
        )));
    }
    let mut params = TensorMap::with_capacity(count);
    for (ref_name, ref_t) in reference.params() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if &name != ref_name {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} where {ref_name:?} was expected"
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != ref_t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                ref_t.shape()
            )));
        }
        let data = (0..ref_t.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.insert(
            name,
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    let entries = r.u32()? as usize;
    let mut log = Vec::with_capacity(entries.min(1 << 20));
    for _ in 0..entries {
        log.push(EpochLog {
            loss: r.f64()?,
            accuracy: r.f64()?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(TrainedNetwork {
        spec: expected.clone(),
        params,
        log,
    })
}

pub fn save_checkpoint(net: &TrainedNetwork, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: &NetworkSpec) -> Result<TrainedNetwork> {
    decode_checkpoint(&fs::read(path)?, expected)
}
