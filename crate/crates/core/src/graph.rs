//! Reverse-mode differentiation over small feed-forward graphs.
//!
//! A [`ComputeGraph`] is an append-only list of operation nodes; a node may
//! only reference earlier nodes, so the topology is acyclic by construction.
//! Every non-parameter node carries a leading batch axis. Parameters are
//! unbatched and live in a [`TensorMap`] in declaration order.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dParams, Dims4, Pool2dParams};
use crate::tensor::{Tensor, TensorMap};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param(usize),
    /// `[B, in] x [in, out]`; the right operand must be a parameter.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a `[C]` parameter along axis 1.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        params: Conv2dParams,
    },
    MaxPool2d(NodeId, Pool2dParams),
    AvgPool2d(NodeId, Pool2dParams),
    Relu(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Concatenation along the first per-sample axis.
    Concat(Vec<NodeId>),
    Zero(NodeId),
    Identity(NodeId),
    Flatten(NodeId),
    GlobalAvgPool(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d(..) => "max_pool2d",
            Op::AvgPool2d(..) => "avg_pool2d",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Zero(_) => "zero",
            Op::Identity(_) => "identity",
            Op::Flatten(_) => "flatten",
            Op::GlobalAvgPool(_) => "global_avg_pool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy on logits against a probability (usually
    /// one-hot) target, averaged over the batch.
    CrossEntropy,
    /// Mean over all elements of the squared residual, no ½ factor.
    MeanSquaredError,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// Per-sample shape for batched nodes, full shape for parameters.
    shape: Vec<usize>,
}

impl Node {
    fn batched(&self) -> bool {
        !matches!(self.op, Op::Param(_))
    }
}

#[derive(Debug, Clone)]
struct Cache {
    values: Vec<Tensor>,
    target: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: TensorMap,
    output: NodeId,
    loss: LossKind,
    cache: Option<Cache>,
}

/// Incrementally builds a graph, checking shapes as nodes are added.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: TensorMap,
}

impl GraphBuilder {
    /// Starts a graph whose input has the given per-sample shape.
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            nodes: vec![Node {
                op: Op::Input,
                shape: input_shape.to_vec(),
            }],
            params: TensorMap::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn batched(&self, id: NodeId, ctx: &str) -> Result<&[usize]> {
        let node = self
            .nodes
            .get(id)
            .ok_or_else(|| Error::shape(format!("{ctx}: unknown node {id}")))?;
        if !node.batched() {
            return Err(Error::shape(format!("{ctx}: node {id} is a parameter")));
        }
        Ok(&node.shape)
    }

    fn param_shape(&self, id: NodeId, ctx: &str) -> Result<&[usize]> {
        let node = self
            .nodes
            .get(id)
            .ok_or_else(|| Error::shape(format!("{ctx}: unknown node {id}")))?;
        if node.batched() {
            return Err(Error::shape(format!("{ctx}: node {id} must be a parameter")));
        }
        Ok(&node.shape)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        let (index, _) = self.params.insert_full(name.to_string(), value);
        Ok(self.push(Op::Param(index), shape))
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.batched(x, "matmul")?.to_vec();
        let ws = self.param_shape(w, "matmul")?.to_vec();
        if xs.len() != 1 || ws.len() != 2 || xs[0] != ws[0] {
            return Err(Error::shape(format!(
                "matmul: input per-sample {xs:?} incompatible with weight {ws:?}"
            )));
        }
        Ok(self.push(Op::MatMul(x, w), vec![ws[1]]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.batched(a, "add")?.to_vec();
        let sb = self.batched(b, "add")?;
        if sa != sb {
            return Err(Error::shape(format!("add: {sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.batched(x, "add_bias")?.to_vec();
        let bs = self.param_shape(bias, "add_bias")?;
        if xs.is_empty() || bs != [xs[0]] {
            return Err(Error::shape(format!("add_bias: input {xs:?} vs bias {bs:?}")));
        }
        Ok(self.push(Op::AddBias(x, bias), xs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xs = self.batched(x, "scale")?.to_vec();
        Ok(self.push(Op::Scale(x, factor), xs))
    }

    pub fn sum(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::shape("sum: no inputs"))?;
        let shape = self.batched(first, "sum")?.to_vec();
        for &i in inputs {
            if self.batched(i, "sum")? != shape.as_slice() {
                return Err(Error::shape(format!("sum: {:?} vs {shape:?}", self.nodes[i].shape)));
            }
        }
        Ok(self.push(Op::Sum(inputs.to_vec()), shape))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, params: Conv2dParams) -> Result<NodeId> {
        let xs = self.batched(x, "conv2d")?.to_vec();
        let ks = self.param_shape(kernel, "conv2d")?.to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || params.dilation == 0 {
            return Err(Error::shape(format!(
                "conv2d: input {xs:?} incompatible with kernel {ks:?}"
            )));
        }
        let (ho, wo) = kernels::conv_out_hw(xs[1], xs[2], ks[2], ks[3], &params)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel {ks:?} larger than input {xs:?}")))?;
        Ok(self.push(
            Op::Conv2d {
                input: x,
                kernel,
                params,
            },
            vec![ks[0], ho, wo],
        ))
    }

    fn pool_shape(&self, x: NodeId, p: &Pool2dParams, ctx: &str) -> Result<Vec<usize>> {
        let xs = self.batched(x, ctx)?;
        if xs.len() != 3 {
            return Err(Error::shape(format!("{ctx}: expected [C,H,W], got {xs:?}")));
        }
        let (ho, wo) = kernels::pool_out_hw(xs[1], xs[2], p)
            .ok_or_else(|| Error::shape(format!("{ctx}: window {p:?} does not fit {xs:?}")))?;
        Ok(vec![xs[0], ho, wo])
    }

    pub fn max_pool2d(&mut self, x: NodeId, p: Pool2dParams) -> Result<NodeId> {
        let shape = self.pool_shape(x, &p, "max_pool2d")?;
        Ok(self.push(Op::MaxPool2d(x, p), shape))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, p: Pool2dParams) -> Result<NodeId> {
        let shape = self.pool_shape(x, &p, "avg_pool2d")?;
        Ok(self.push(Op::AvgPool2d(x, p), shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.batched(x, "relu")?.to_vec();
        Ok(self.push(Op::Relu(x), xs))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.batched(x, "softmax")?.to_vec();
        if xs.is_empty() {
            return Err(Error::shape("softmax: scalar per-sample input"));
        }
        Ok(self.push(Op::Softmax(x), xs))
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat: no inputs"))?;
        let mut shape = self.batched(first, "concat")?.to_vec();
        if shape.is_empty() {
            return Err(Error::shape("concat: scalar per-sample input"));
        }
        for &i in &inputs[1..] {
            let s = self.batched(i, "concat")?;
            if s.len() != shape.len() || s[1..] != shape[1..] {
                return Err(Error::shape(format!("concat: {s:?} vs {shape:?}")));
            }
            shape[0] += s[0];
        }
        Ok(self.push(Op::Concat(inputs.to_vec()), shape))
    }

    pub fn zero(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.batched(x, "zero")?.to_vec();
        Ok(self.push(Op::Zero(x), xs))
    }

    pub fn identity(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.batched(x, "identity")?.to_vec();
        Ok(self.push(Op::Identity(x), xs))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n: usize = self.batched(x, "flatten")?.iter().product();
        Ok(self.push(Op::Flatten(x), vec![n]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.batched(x, "global_avg_pool")?;
        if xs.len() != 3 {
            return Err(Error::shape(format!("global_avg_pool: expected [C,H,W], got {xs:?}")));
        }
        let c = xs[0];
        Ok(self.push(Op::GlobalAvgPool(x), vec![c]))
    }

    /// Finishes the graph with `output` as the prediction node.
    pub fn build(self, output: NodeId, loss: LossKind) -> Result<ComputeGraph> {
        let shape = self.batched(output, "output")?.to_vec();
        if loss == LossKind::CrossEntropy && shape.len() != 1 {
            return Err(Error::shape(format!(
                "cross-entropy needs [classes] logits, got {shape:?}"
            )));
        }
        Ok(ComputeGraph {
            nodes: self.nodes,
            params: self.params,
            output,
            loss,
            cache: None,
        })
    }
}

fn dims4(shape_with_batch: &[usize]) -> Dims4 {
    Dims4 {
        n: shape_with_batch[0],
        c: shape_with_batch[1],
        h: shape_with_batch[2],
        w: shape_with_batch[3],
    }
}

fn with_batch(batch: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(sample.len() + 1);
    s.push(batch);
    s.extend_from_slice(sample);
    s
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (v, e) in row.iter().zip(o.iter_mut()) {
            *e = (v - max).exp();
            z += *e;
        }
        for e in o.iter_mut() {
            *e /= z;
        }
    }
    out
}

/// Batch-mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let width = *logits.shape().last().unwrap_or(&1);
    let batch = logits.len() / width.max(1);
    let probs = softmax_rows(logits.data(), width);
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for b in 0..batch {
        let row = &logits.data()[b * width..(b + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let t = &target.data()[b * width..(b + 1) * width];
        let mass: f64 = t.iter().sum();
        for j in 0..width {
            loss -= t[j] * (row[j] - lse);
            grad[b * width + j] = (probs[b * width + j] * mass - t[j]) / batch as f64;
        }
    }
    (loss / batch as f64, Tensor::from_parts(logits.shape().to_vec(), grad))
}

fn mean_squared_error(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    (loss / n, Tensor::from_parts(pred.shape().to_vec(), grad))
}

impl ComputeGraph {
    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    /// Mutable parameter access; invalidates any cached forward pass.
    pub fn params_mut(&mut self) -> &mut TensorMap {
        self.cache = None;
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn set_params(&mut self, params: TensorMap) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
        {
            return Err(Error::shape("parameter set does not match graph"));
        }
        self.params = params;
        self.cache = None;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Drops any cached activations.
    pub fn reset(&mut self) {
        self.cache = None;
    }

    fn check_batched(&self, t: &Tensor, sample: &[usize], what: &str) -> Result<usize> {
        if t.shape().is_empty() || t.sample_shape() != sample {
            return Err(Error::shape(format!(
                "{what} shape {:?} does not match declared [batch, {}]",
                t.shape(),
                sample.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
        if t.batch_size() == 0 {
            return Err(Error::EmptyData(format!("{what} batch is empty")));
        }
        Ok(t.batch_size())
    }

    fn run_nodes(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let batch = self.check_batched(input, self.input_shape(), "input")?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = self.eval_node(node, &values, input, batch)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "activation of node {id} ({})",
                    node.op.name()
                )));
            }
            values.push(v);
        }
        Ok(values)
    }

    fn eval_node(&self, node: &Node, values: &[Tensor], input: &Tensor, batch: usize) -> Result<Tensor> {
        let full = with_batch(batch, &node.shape);
        Ok(match &node.op {
            Op::Input => input.clone(),
            Op::Param(i) => self.params[*i].clone(),
            Op::MatMul(x, w) => {
                let (xv, wv) = (&values[*x], &values[*w]);
                let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
                let mut out = vec![0.0; batch * n_out];
                for b in 0..batch {
                    let xr = &xv.data()[b * n_in..(b + 1) * n_in];
                    let or = &mut out[b * n_out..(b + 1) * n_out];
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let wr = &wv.data()[i * n_out..(i + 1) * n_out];
                        for (o, &w) in or.iter_mut().zip(wr) {
                            *o += xi * w;
                        }
                    }
                }
                Tensor::from_parts(full, out)
            }
            Op::Add(a, b) => {
                let mut out = values[*a].clone();
                out.add_assign(&values[*b]);
                out
            }
            Op::AddBias(x, bias) => {
                let mut out = values[*x].clone();
                let c = node.shape[0];
                let inner: usize = node.shape[1..].iter().product();
                let bv = values[*bias].data();
                for (k, v) in out.data_mut().iter_mut().enumerate() {
                    *v += bv[(k / inner) % c];
                }
                out
            }
            Op::Scale(x, f) => {
                let mut out = values[*x].clone();
                out.scale_assign(*f);
                out
            }
            Op::Sum(inputs) => {
                let mut out = values[inputs[0]].clone();
                for i in &inputs[1..] {
                    out.add_assign(&values[*i]);
                }
                out
            }
            Op::Conv2d {
                input: x,
                kernel,
                params,
            } => {
                let (xv, kv) = (&values[*x], &values[*kernel]);
                let ks = kv.shape();
                let data = kernels::conv2d_forward(
                    xv.data(),
                    dims4(xv.shape()),
                    kv.data(),
                    ks[0],
                    ks[2],
                    ks[3],
                    params,
                    node.shape[1],
                    node.shape[2],
                );
                Tensor::from_parts(full, data)
            }
            Op::MaxPool2d(x, p) => {
                let xv = &values[*x];
                let data = kernels::max_pool_forward(xv.data(), dims4(xv.shape()), p, node.shape[1], node.shape[2]);
                Tensor::from_parts(full, data)
            }
            Op::AvgPool2d(x, p) => {
                let xv = &values[*x];
                let data = kernels::avg_pool_forward(xv.data(), dims4(xv.shape()), p, node.shape[1], node.shape[2]);
                Tensor::from_parts(full, data)
            }
            Op::Relu(x) => {
                let data = values[*x].data().iter().map(|v| v.max(0.0)).collect();
                Tensor::from_parts(full, data)
            }
            Op::Softmax(x) => {
                let width = *node.shape.last().unwrap();
                Tensor::from_parts(full, softmax_rows(values[*x].data(), width))
            }
            Op::Concat(inputs) => {
                let inner: usize = node.shape[1..].iter().product();
                let mut data = Vec::with_capacity(full.iter().product());
                for b in 0..batch {
                    for i in inputs {
                        let v = &values[*i];
                        let chunk = v.sample_shape()[0] * inner;
                        data.extend_from_slice(&v.data()[b * chunk..(b + 1) * chunk]);
                    }
                }
                Tensor::from_parts(full, data)
            }
            Op::Zero(_) => Tensor::zeros(&full),
            Op::Identity(x) => values[*x].clone(),
            Op::Flatten(x) => Tensor::from_parts(full, values[*x].data().to_vec()),
            Op::GlobalAvgPool(x) => {
                let xv = &values[*x];
                let hw = xv.shape()[2] * xv.shape()[3];
                let data = xv
                    .data()
                    .chunks(hw)
                    .map(|c| c.iter().sum::<f64>() / hw as f64)
                    .collect();
                Tensor::from_parts(full, data)
            }
        })
    }

    /// Runs the graph and returns the scalar loss; activations are cached
    /// for [`ComputeGraph::backward`].
    pub fn forward(&mut self, input: &Tensor, target: &Tensor) -> Result<f64> {
        self.cache = None;
        let batch = self.check_batched(input, self.input_shape(), "input")?;
        let tb = self.check_batched(target, self.output_shape(), "target")?;
        if tb != batch {
            return Err(Error::shape(format!("input batch {batch} vs target batch {tb}")));
        }
        let values = self.run_nodes(input)?;
        let (loss, _) = self.loss_and_grad(&values[self.output], target);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss}")));
        }
        self.cache = Some(Cache {
            values,
            target: Some(target.clone()),
        });
        Ok(loss)
    }

    /// Runs the graph without a loss and returns the output node's value.
    /// The activations are cached for [`ComputeGraph::backward_from_output`].
    pub fn forward_output(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = None;
        let values = self.run_nodes(input)?;
        let out = values[self.output].clone();
        self.cache = Some(Cache { values, target: None });
        Ok(out)
    }

    /// Output of the graph with no cache retained.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut values = self.run_nodes(input)?;
        Ok(values.swap_remove(self.output))
    }

    fn loss_and_grad(&self, pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
        match self.loss {
            LossKind::CrossEntropy => cross_entropy(pred, target),
            LossKind::MeanSquaredError => mean_squared_error(pred, target),
        }
    }

    /// Gradient of the cached loss w.r.t. every parameter.
    pub fn backward(&self) -> Result<TensorMap> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardPass)?;
        let target = cache.target.as_ref().ok_or(Error::NoForwardPass)?;
        let (_, seed) = self.loss_and_grad(&cache.values[self.output], target);
        self.propagate(cache, seed)
    }

    /// Back-propagates an arbitrary upstream gradient of the output node.
    pub fn backward_from_output(&self, output_grad: &Tensor) -> Result<TensorMap> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardPass)?;
        if output_grad.shape() != cache.values[self.output].shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} vs output {:?}",
                output_grad.shape(),
                cache.values[self.output].shape()
            )));
        }
        self.propagate(cache, output_grad.clone())
    }

    fn propagate(&self, cache: &Cache, seed: Tensor) -> Result<TensorMap> {
        let values = &cache.values;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(seed);

        fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=self.output).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[id] = Some(g);
                }
                Op::MatMul(x, w) => {
                    let (xv, wv) = (&values[*x], &values[*w]);
                    let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
                    let batch = xv.batch_size();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    for b in 0..batch {
                        let gr = &g.data()[b * n_out..(b + 1) * n_out];
                        let xr = &xv.data()[b * n_in..(b + 1) * n_in];
                        for i in 0..n_in {
                            let wr = &wv.data()[i * n_out..(i + 1) * n_out];
                            let mut acc = 0.0;
                            for (gv, wv) in gr.iter().zip(wr) {
                                acc += gv * wv;
                            }
                            dx[b * n_in + i] = acc;
                            let xi = xr[i];
                            if xi != 0.0 {
                                for (d, gv) in dw[i * n_out..(i + 1) * n_out].iter_mut().zip(gr) {
                                    *d += xi * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                    accumulate(&mut grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBias(x, bias) => {
                    let c = node.shape[0];
                    let inner: usize = node.shape[1..].iter().product();
                    let mut db = vec![0.0; c];
                    for (k, v) in g.data().iter().enumerate() {
                        db[(k / inner) % c] += v;
                    }
                    accumulate(&mut grads, *bias, Tensor::from_parts(vec![c], db));
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, f) => {
                    let mut g = g;
                    g.scale_assign(*f);
                    accumulate(&mut grads, *x, g);
                }
                Op::Sum(inputs) => {
                    for i in inputs {
                        accumulate(&mut grads, *i, g.clone());
                    }
                }
                Op::Conv2d {
                    input: x,
                    kernel,
                    params,
                } => {
                    let (xv, kv) = (&values[*x], &values[*kernel]);
                    let ks = kv.shape();
                    let (dx, dk) = kernels::conv2d_backward(
                        xv.data(),
                        dims4(xv.shape()),
                        kv.data(),
                        ks[0],
                        ks[2],
                        ks[3],
                        params,
                        node.shape[1],
                        node.shape[2],
                        g.data(),
                    );
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                    accumulate(&mut grads, *kernel, Tensor::from_parts(ks.to_vec(), dk));
                }
                Op::MaxPool2d(x, p) => {
                    let xv = &values[*x];
                    let dx = kernels::max_pool_backward(
                        xv.data(),
                        dims4(xv.shape()),
                        p,
                        node.shape[1],
                        node.shape[2],
                        g.data(),
                    );
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::AvgPool2d(x, p) => {
                    let xv = &values[*x];
                    let dx = kernels::avg_pool_backward(
                        xv.data(),
                        dims4(xv.shape()),
                        p,
                        node.shape[1],
                        node.shape[2],
                        g.data(),
                    );
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::Relu(x) => {
                    let xv = &values[*x];
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::Softmax(x) => {
                    let s = &values[id];
                    let width = *node.shape.last().unwrap();
                    let mut dx = vec![0.0; s.len()];
                    for ((sr, gr), dr) in s
                        .data()
                        .chunks(width)
                        .zip(g.data().chunks(width))
                        .zip(dx.chunks_mut(width))
                    {
                        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            dr[j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(s.shape().to_vec(), dx));
                }
                Op::Concat(inputs) => {
                    let inner: usize = node.shape[1..].iter().product();
                    let batch = g.batch_size();
                    let mut parts: Vec<Vec<f64>> =
                        inputs.iter().map(|i| Vec::with_capacity(values[*i].len())).collect();
                    let mut offset = 0;
                    for _ in 0..batch {
                        for (k, i) in inputs.iter().enumerate() {
                            let chunk = values[*i].sample_shape()[0] * inner;
                            parts[k].extend_from_slice(&g.data()[offset..offset + chunk]);
                            offset += chunk;
                        }
                    }
                    for (i, data) in inputs.iter().zip(parts) {
                        accumulate(&mut grads, *i, Tensor::from_parts(values[*i].shape().to_vec(), data));
                    }
                }
                Op::Zero(_) => {}
                Op::Identity(x) => accumulate(&mut grads, *x, g),
                Op::Flatten(x) => {
                    let shape = values[*x].shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, g.into_data()));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = &values[*x];
                    let hw = xv.shape()[2] * xv.shape()[3];
                    let dx = g
                        .data()
                        .iter()
                        .flat_map(|gv| std::iter::repeat_n(gv / hw as f64, hw))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
        }

        let mut out = TensorMap::with_capacity(self.params.len());
        let mut by_param: Vec<Option<Tensor>> = vec![None; self.params.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(i) = node.op {
                if let Some(g) = grads[id].take() {
                    match &mut by_param[i] {
                        Some(existing) => existing.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        for ((name, p), g) in self.params.iter().zip(by_param) {
            let g = g.unwrap_or_else(|| Tensor::zeros(p.shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Calls `visit(i, grads)` with the loss gradient of each sample `i`
    /// taken alone (one backward pass per sample).
    pub fn for_each_sample_grad(
        &mut self,
        inputs: &Tensor,
        targets: &Tensor,
        mut visit: impl FnMut(usize, &TensorMap) -> Result<()>,
    ) -> Result<()> {
        let n = inputs.batch_size();
        if inputs.shape().is_empty() || n == 0 {
            return Err(Error::EmptyData("per-sample gradients need at least one sample".into()));
        }
        if targets.batch_size() != n {
            return Err(Error::shape(format!("{n} inputs vs {} targets", targets.batch_size())));
        }
        for i in 0..n {
            self.forward(&inputs.slice_batch(i, i + 1), &targets.slice_batch(i, i + 1))?;
            let g = self.backward()?;
            visit(i, &g)?;
        }
        self.cache = None;
        Ok(())
    }

    /// One gradient map per sample, each equal to `backward` on that
    /// sample alone.
    pub fn per_sample_grads(&mut self, inputs: &Tensor, targets: &Tensor) -> Result<Vec<TensorMap>> {
        let mut out = Vec::with_capacity(inputs.batch_size());
        self.for_each_sample_grad(inputs, targets, |_, g| {
            out.push(g.clone());
            Ok(())
        })?;
        Ok(out)
    }
}
