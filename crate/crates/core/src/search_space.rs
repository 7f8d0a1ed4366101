//! Cell-and-skeleton architecture space.
//!
//! A cell is a densely connected DAG over `n` nodes: node 0 is the cell
//! input, node `n - 1` the cell output, and every ordered pair `i < j`
//! carries exactly one operation. A node's value is the mean of its
//! incoming edge outputs. A skeleton stacks cells between a fixed stem and
//! a classifier head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NodeId};
use crate::kernels::{Conv2dParams, Pool2dParams};
use crate::networks::{NetworkKind, NetworkSpec, ParamInit};

pub const MIN_NODES: usize = 2;
pub const MAX_NODES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    Zero,
    Identity,
    MaxPool3x3,
    AvgPool3x3,
    Conv3x3,
    Conv5x5,
    Conv7x7,
    DilConv3x3,
    DilConv5x5,
    Conv7x1_1x7,
}

impl OperationKind {
    pub const ALL: [OperationKind; 10] = [
        OperationKind::Zero,
        OperationKind::Identity,
        OperationKind::MaxPool3x3,
        OperationKind::AvgPool3x3,
        OperationKind::Conv3x3,
        OperationKind::Conv5x5,
        OperationKind::Conv7x7,
        OperationKind::DilConv3x3,
        OperationKind::DilConv5x5,
        OperationKind::Conv7x1_1x7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::Zero => "zero",
            OperationKind::Identity => "identity",
            OperationKind::MaxPool3x3 => "maxpool3x3",
            OperationKind::AvgPool3x3 => "avgpool3x3",
            OperationKind::Conv3x3 => "conv3x3",
            OperationKind::Conv5x5 => "conv5x5",
            OperationKind::Conv7x7 => "conv7x7",
            OperationKind::DilConv3x3 => "dil_conv3x3",
            OperationKind::DilConv5x5 => "dil_conv5x5",
            OperationKind::Conv7x1_1x7 => "conv7x1_1x7",
        }
    }

    pub fn is_parametric(self) -> bool {
        !matches!(
            self,
            OperationKind::Zero | OperationKind::Identity | OperationKind::MaxPool3x3 | OperationKind::AvgPool3x3
        )
    }

    /// Appends this operation to `b` on a `[C, H, W]` node, preserving shape.
    fn build(
        self,
        b: &mut GraphBuilder,
        x: NodeId,
        channels: usize,
        prefix: &str,
        init: &mut ParamInit,
    ) -> Result<NodeId> {
        let same_pool = Pool2dParams {
            size: 3,
            stride: 1,
            padding: 1,
        };
        let conv =
            |b: &mut GraphBuilder, x: NodeId, init: &mut ParamInit, name: &str, kh: usize, kw: usize, dil: usize| {
                let k = b.param(name, init.kernel(channels, channels, kh, kw))?;
                let p = Conv2dParams {
                    stride: 1,
                    pad_h: dil * (kh / 2),
                    pad_w: dil * (kw / 2),
                    dilation: dil,
                };
                b.conv2d(x, k, p)
            };
        Ok(match self {
            OperationKind::Zero => b.zero(x)?,
            OperationKind::Identity => b.identity(x)?,
            OperationKind::MaxPool3x3 => b.max_pool2d(x, same_pool)?,
            OperationKind::AvgPool3x3 => b.avg_pool2d(x, same_pool)?,
            OperationKind::Conv3x3 | OperationKind::Conv5x5 | OperationKind::Conv7x7 => {
                let k = match self {
                    OperationKind::Conv3x3 => 3,
                    OperationKind::Conv5x5 => 5,
                    _ => 7,
                };
                let r = b.relu(x)?;
                conv(b, r, init, &format!("{prefix}.k"), k, k, 1)?
            }
            OperationKind::DilConv3x3 | OperationKind::DilConv5x5 => {
                let k = if self == OperationKind::DilConv3x3 { 3 } else { 5 };
                let r = b.relu(x)?;
                conv(b, r, init, &format!("{prefix}.k"), k, k, 2)?
            }
            OperationKind::Conv7x1_1x7 => {
                let r = b.relu(x)?;
                let v = conv(b, r, init, &format!("{prefix}.k7x1"), 7, 1, 1)?;
                conv(b, v, init, &format!("{prefix}.k1x7"), 1, 7, 1)?
            }
        })
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let norm = match norm.as_str() {
            "avepool3x3" => "avgpool3x3".to_string(),
            "dilconv3x3" => "dil_conv3x3".to_string(),
            "dilconv5x5" => "dil_conv5x5".to_string(),
            _ => norm,
        };
        OperationKind::ALL
            .into_iter()
            .find(|op| op.name() == norm)
            .ok_or_else(|| format!("unknown operation {s:?}"))
    }
}

/// A cell as written, before validation (operations still by name).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellDraft {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NodeCount(usize),
    BackwardEdge(usize, usize),
    EdgeOutOfRange(usize, usize),
    DuplicateEdge(usize, usize),
    UnknownOperation { from: usize, to: usize, name: String },
    NotDenselyConnected { missing: Vec<(usize, usize)> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NodeCount(n) => write!(f, "node count {n} outside [{MIN_NODES}, {MAX_NODES}]"),
            Violation::BackwardEdge(i, j) => write!(f, "edge ({i}, {j}) does not go forward"),
            Violation::EdgeOutOfRange(i, j) => write!(f, "edge ({i}, {j}) references a missing node"),
            Violation::DuplicateEdge(i, j) => write!(f, "edge ({i}, {j}) appears twice"),
            Violation::UnknownOperation { from, to, name } => {
                write!(f, "edge ({from}, {to}) has unknown operation {name:?}")
            }
            Violation::NotDenselyConnected { missing } => {
                write!(f, "not densely connected: missing {missing:?}")
            }
        }
    }
}

/// Checks node count, forward-only edges, operation membership and density.
pub fn validate(draft: &CellDraft) -> std::result::Result<(), Vec<Violation>> {
    let n = draft.num_nodes;
    let mut v = Vec::new();
    if !(MIN_NODES..=MAX_NODES).contains(&n) {
        v.push(Violation::NodeCount(n));
    }
    let mut seen = BTreeSet::new();
    for (i, j, op) in &draft.edges {
        let (i, j) = (*i, *j);
        if i >= n || j >= n {
            v.push(Violation::EdgeOutOfRange(i, j));
        } else if i >= j {
            v.push(Violation::BackwardEdge(i, j));
        } else if !seen.insert((i, j)) {
            v.push(Violation::DuplicateEdge(i, j));
        }
        if op.parse::<OperationKind>().is_err() {
            v.push(Violation::UnknownOperation {
                from: i,
                to: j,
                name: op.clone(),
            });
        }
    }
    let missing: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|e| !seen.contains(e))
        .collect();
    if !missing.is_empty() {
        v.push(Violation::NotDenselyConnected { missing });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

fn violations_error(v: Vec<Violation>) -> Error {
    Error::invalid(format!(
        "invalid cell: {}",
        v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    ))
}

/// A validated cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellSpec {
    num_nodes: usize,
    edges: BTreeMap<(usize, usize), OperationKind>,
}

impl CellSpec {
    pub fn new(num_nodes: usize, edges: BTreeMap<(usize, usize), OperationKind>) -> Result<Self> {
        let draft = CellDraft {
            num_nodes,
            edges: edges
                .iter()
                .map(|(&(i, j), op)| (i, j, op.name().to_string()))
                .collect(),
        };
        validate(&draft).map_err(violations_error)?;
        Ok(Self { num_nodes, edges })
    }

    pub fn from_draft(draft: &CellDraft) -> Result<Self> {
        validate(draft).map_err(violations_error)?;
        let edges = draft
            .edges
            .iter()
            .map(|(i, j, op)| ((*i, *j), op.parse().unwrap()))
            .collect();
        Ok(Self {
            num_nodes: draft.num_nodes,
            edges,
        })
    }

    /// Every edge carries `op`.
    pub fn uniform(num_nodes: usize, op: OperationKind) -> Result<Self> {
        let edges = (0..num_nodes)
            .flat_map(|i| (i + 1..num_nodes).map(move |j| ((i, j), op)))
            .collect();
        Self::new(num_nodes, edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &BTreeMap<(usize, usize), OperationKind> {
        &self.edges
    }

    pub fn op(&self, from: usize, to: usize) -> Option<OperationKind> {
        self.edges.get(&(from, to)).copied()
    }

    /// Distinct operations used, in canonical order.
    pub fn operations(&self) -> Vec<OperationKind> {
        self.edges
            .values()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn is_all(&self, op: OperationKind) -> bool {
        self.edges.values().all(|&o| o == op)
    }

    /// Line-oriented text form.
    pub fn serialize(&self) -> String {
        let mut s = format!("cell v1\nnodes {}\n", self.num_nodes);
        for (&(i, j), op) in &self.edges {
            s.push_str(&format!("edge {i} {j} {op}\n"));
        }
        s
    }

    /// One-line form, e.g. `3:0-1=conv3x3,0-2=zero,1-2=identity`.
    pub fn compact(&self) -> String {
        let edges: Vec<String> = self.edges.iter().map(|(&(i, j), op)| format!("{i}-{j}={op}")).collect();
        format!("{}:{}", self.num_nodes, edges.join(","))
    }

    /// Appends the cell to `b`, returning its output node.
    pub(crate) fn build(
        &self,
        b: &mut GraphBuilder,
        input: NodeId,
        channels: usize,
        residual: bool,
        prefix: &str,
        init: &mut ParamInit,
    ) -> Result<NodeId> {
        let mut nodes = vec![input];
        for j in 1..self.num_nodes {
            let mut incoming = Vec::with_capacity(j);
            for (i, &src) in nodes.iter().enumerate() {
                let op = self.edges[&(i, j)];
                incoming.push(op.build(b, src, channels, &format!("{prefix}.e{i}{j}"), init)?);
            }
            let node = if incoming.len() == 1 {
                incoming[0]
            } else {
                let s = b.sum(&incoming)?;
                b.scale(s, 1.0 / incoming.len() as f64)?
            };
            nodes.push(node);
        }
        let out = *nodes.last().unwrap();
        if residual {
            let s = b.sum(&[out, input])?;
            b.scale(s, 0.5)
        } else {
            Ok(out)
        }
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.compact())
    }
}

fn cell_err(line: usize, message: impl Into<String>) -> Error {
    Error::CellFormat {
        line,
        message: message.into(),
    }
}

/// Parses one `cell v1` block from `lines` (1-based numbering from `first_line`).
fn parse_cell_lines<'a>(lines: &mut std::iter::Peekable<impl Iterator<Item = (usize, &'a str)>>) -> Result<CellSpec> {
    let (ln, header) = lines.next().ok_or_else(|| cell_err(0, "missing `cell v1` header"))?;
    if header != "cell v1" {
        return Err(cell_err(ln, format!("expected `cell v1`, found {header:?}")));
    }
    let (ln, nodes_line) = lines.next().ok_or_else(|| cell_err(ln, "missing `nodes` line"))?;
    let num_nodes = nodes_line
        .strip_prefix("nodes ")
        .and_then(|n| n.trim().parse::<usize>().ok())
        .ok_or_else(|| cell_err(ln, format!("expected `nodes <n>`, found {nodes_line:?}")))?;
    let mut edges = Vec::new();
    while let Some((ln, line)) = lines.next_if(|(_, l)| l.starts_with("edge")) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(cell_err(ln, format!("expected `edge <i> <j> <op>`, found {line:?}")));
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| cell_err(ln, format!("bad node index {s:?}")))
        };
        edges.push((idx(parts[1])?, idx(parts[2])?, parts[3].to_string()));
    }
    CellSpec::from_draft(&CellDraft { num_nodes, edges })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_cell(text: &str) -> Result<CellSpec> {
    let mut lines = content_lines(text).peekable();
    let cell = parse_cell_lines(&mut lines)?;
    if let Some((ln, extra)) = lines.next() {
        return Err(cell_err(ln, format!("unexpected trailing line {extra:?}")));
    }
    Ok(cell)
}

/// Number of distinct cells with `n` nodes and `m` operations: one of `m`
/// operations on each of the `n(n-1)/2` edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellCount {
    Exact(u64),
    /// Decimal digits of a count that overflows 64 bits.
    Big(String),
}

impl fmt::Display for CellCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellCount::Exact(v) => write!(f, "{v}"),
            CellCount::Big(s) => f.write_str(s),
        }
    }
}

pub fn count_cells(n: usize, m: usize) -> Result<CellCount> {
    if n < 2 || m < 1 {
        return Err(Error::invalid(format!(
            "count_cells needs n >= 2 and m >= 1, got n={n} m={m}"
        )));
    }
    let edges = u32::try_from(n * (n - 1) / 2).map_err(|_| Error::invalid("too many edges"))?;
    Ok(match (m as u64).checked_pow(edges) {
        Some(v) => CellCount::Exact(v),
        None => CellCount::Big(BigUint::from(m).pow(edges).to_string()),
    })
}

/// `m * exp(n! / (2 (n-2)!))`, an expression sometimes quoted for the size
/// of this space. It is not the enumeration count ([`count_cells`]); it is
/// kept only so reports can show the two side by side.
pub fn exponential_count_expression(n: usize, m: usize) -> f64 {
    let pairs = (n * (n - 1) / 2) as f64;
    m as f64 * pairs.exp()
}

/// Uniform sampler over cells with a fixed node count and operation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSampler {
    num_nodes: usize,
    ops: Vec<OperationKind>,
}

impl CellSampler {
    pub fn new(num_nodes: usize, ops: &[OperationKind]) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::invalid("operation set is empty"));
        }
        if !(MIN_NODES..=MAX_NODES).contains(&num_nodes) {
            return Err(Error::invalid(format!(
                "node count {num_nodes} outside [{MIN_NODES}, {MAX_NODES}]"
            )));
        }
        let ops: Vec<OperationKind> = ops.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self { num_nodes, ops })
    }

    pub fn full(num_nodes: usize) -> Result<Self> {
        Self::new(num_nodes, &OperationKind::ALL)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn ops(&self) -> &[OperationKind] {
        &self.ops
    }

    pub fn space_size(&self) -> CellCount {
        count_cells(self.num_nodes, self.ops.len()).expect("sampler invariants hold")
    }

    pub fn sample_with<R: Rng>(&self, rng: &mut R) -> CellSpec {
        let mut edges = BTreeMap::new();
        for i in 0..self.num_nodes {
            for j in i + 1..self.num_nodes {
                edges.insert((i, j), self.ops[rng.random_range(0..self.ops.len())]);
            }
        }
        CellSpec {
            num_nodes: self.num_nodes,
            edges,
        }
    }

    pub fn sample(&self, seed: u64) -> CellSpec {
        self.sample_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Independent uniform operation per edge.
pub fn sample_cell(n: usize, ops: &[OperationKind], seed: u64) -> Result<CellSpec> {
    Ok(CellSampler::new(n, ops)?.sample(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Cell,
    /// 2x2 stride-2 max pooling.
    Reduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Flatten,
    GlobalAvgPool,
}

/// Macro-structure: 3x3 stem convolution, stages, linear classifier head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub stem_channels: usize,
    pub stages: Vec<Stage>,
    pub head: Head,
    /// Adds a cell-input skip, averaged with the cell output.
    pub residual: bool,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stages: vec![Stage::Cell, Stage::Reduce, Stage::Cell],
            head: Head::Flatten,
            residual: false,
        }
    }
}

impl Skeleton {
    /// The same skeleton with every cell stage removed.
    pub fn without_cells(&self) -> Skeleton {
        Skeleton {
            stages: self.stages.iter().copied().filter(|s| *s == Stage::Reduce).collect(),
            ..self.clone()
        }
    }

    pub fn num_cells(&self) -> usize {
        self.stages.iter().filter(|s| **s == Stage::Cell).count()
    }

    /// Spatial size after all reductions, or `None` if a reduction no longer fits.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for s in &self.stages {
            if *s == Stage::Reduce {
                if h < 2 || w < 2 {
                    return None;
                }
                h /= 2;
                w /= 2;
            }
        }
        Some((h, w))
    }

    pub fn describe(&self) -> String {
        let stages: Vec<&str> = self
            .stages
            .iter()
            .map(|s| match s {
                Stage::Cell => "cell",
                Stage::Reduce => "reduce",
            })
            .collect();
        format!(
            "stem={} layout={} head={} residual={}",
            self.stem_channels,
            stages.join(","),
            match self.head {
                Head::Flatten => "flatten",
                Head::GlobalAvgPool => "gap",
            },
            u8::from(self.residual)
        )
    }

    pub fn parse(text: &str) -> std::result::Result<Skeleton, String> {
        let mut sk = Skeleton::default();
        for part in text.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, found {part:?}"))?;
            match k {
                "stem" => sk.stem_channels = v.parse().map_err(|_| format!("bad stem width {v:?}"))?,
                "layout" => {
                    sk.stages = v
                        .split(',')
                        .map(|s| match s {
                            "cell" => Ok(Stage::Cell),
                            "reduce" => Ok(Stage::Reduce),
                            _ => Err(format!("unknown stage {s:?}")),
                        })
                        .collect::<std::result::Result<_, _>>()?
                }
                "head" => {
                    sk.head = match v {
                        "flatten" => Head::Flatten,
                        "gap" => Head::GlobalAvgPool,
                        _ => return Err(format!("unknown head {v:?}")),
                    }
                }
                "residual" => sk.residual = v == "1" || v == "true",
                _ => return Err(format!("unknown skeleton key {k:?}")),
            }
        }
        if sk.stem_channels == 0 {
            return Err("stem width must be at least 1".into());
        }
        Ok(sk)
    }

    /// Appends stem, stages and head to `b`; returns the logits node.
    pub(crate) fn build(
        &self,
        b: &mut GraphBuilder,
        cell: Option<&CellSpec>,
        num_classes: usize,
        init: &mut ParamInit,
    ) -> Result<NodeId> {
        let input = b.input();
        let in_channels = b.shape_of(input)[0];
        let c = self.stem_channels;
        let k = b.param("stem.k", init.kernel(c, in_channels, 3, 3))?;
        let x = b.conv2d(
            input,
            k,
            Conv2dParams {
                stride: 1,
                pad_h: 1,
                pad_w: 1,
                dilation: 1,
            },
        )?;
        let bias = b.param("stem.b", init.zeros(&[c]))?;
        let x = b.add_bias(x, bias)?;
        let mut x = b.relu(x)?;
        let mut cell_index = 0;
        for stage in &self.stages {
            match stage {
                Stage::Cell => {
                    if let Some(cell) = cell {
                        x = cell.build(b, x, c, self.residual, &format!("cell{cell_index}"), init)?;
                    }
                    cell_index += 1;
                }
                Stage::Reduce => {
                    x = b.max_pool2d(
                        x,
                        Pool2dParams {
                            size: 2,
                            stride: 2,
                            padding: 0,
                        },
                    )?;
                }
            }
        }
        let features = match self.head {
            Head::Flatten => b.flatten(x)?,
            Head::GlobalAvgPool => b.global_avg_pool(x)?,
        };
        let width = b.shape_of(features)[0];
        let w = b.param("head.w", init.dense(width, num_classes))?;
        let logits = b.matmul(features, w)?;
        let hb = b.param("head.b", init.zeros(&[num_classes]))?;
        b.add_bias(logits, hb)
    }
}

/// Places `cell` into `skeleton` for inputs of shape `[C, H, W]`.
pub fn instantiate(
    skeleton: &Skeleton,
    cell: &CellSpec,
    input_shape: &[usize],
    num_classes: usize,
) -> Result<NetworkSpec> {
    if input_shape.len() != 3 || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!(
            "cell networks need [C, H, W] inputs, got {input_shape:?}"
        )));
    }
    if skeleton.stem_channels == 0 {
        return Err(Error::invalid("stem width must be at least 1"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be at least 2"));
    }
    skeleton.output_hw(input_shape[1], input_shape[2]).ok_or_else(|| {
        Error::shape(format!(
            "input {input_shape:?} is too small for the reductions in {}",
            skeleton.describe()
        ))
    })?;
    Ok(NetworkSpec {
        kind: NetworkKind::CellNetwork {
            skeleton: skeleton.clone(),
            cell: cell.clone(),
        },
        input_shape: input_shape.to_vec(),
        num_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineEntry {
    pub cell: CellSpec,
    pub ops: Vec<OperationKind>,
    pub skeleton: Skeleton,
}

/// Baseline task → discovered cell, its operation set and skeleton.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BaselineDictionary {
    pub entries: IndexMap<String, BaselineEntry>,
}

impl BaselineDictionary {
    pub fn insert(&mut self, task: &str, entry: BaselineEntry) {
        self.entries.insert(task.to_string(), entry);
    }

    pub fn get(&self, task: &str) -> Option<&BaselineEntry> {
        self.entries.get(task)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (name, e) in &self.entries {
            let ops: Vec<&str> = e.ops.iter().map(|o| o.name()).collect();
            s.push_str(&format!(
                "task {name}\nops {}\nskeleton {}\n",
                ops.join(","),
                e.skeleton.describe()
            ));
            s.push_str(&e.cell.serialize());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dict = BaselineDictionary::default();
        let mut lines = content_lines(text).peekable();
        while let Some((ln, line)) = lines.next() {
            let name = line
                .strip_prefix("task ")
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| cell_err(ln, format!("expected `task <name>`, found {line:?}")))?;
            let mut ops = None;
            let mut skeleton = Skeleton::default();
            while let Some((ln, l)) = lines.next_if(|(_, l)| l.starts_with("ops ") || l.starts_with("skeleton ")) {
                if let Some(list) = l.strip_prefix("ops ") {
                    let parsed = list
                        .split(',')
                        .map(|o| o.parse::<OperationKind>().map_err(|e| cell_err(ln, e)))
                        .collect::<Result<Vec<_>>>()?;
                    ops = Some(parsed);
                } else {
                    skeleton = Skeleton::parse(&l["skeleton ".len()..]).map_err(|e| cell_err(ln, e))?;
                }
            }
            let cell = parse_cell_lines(&mut lines)?;
            let ops = ops.unwrap_or_else(|| cell.operations());
            if dict.entries.contains_key(name) {
                return Err(cell_err(ln, format!("duplicate task {name:?}")));
            }
            dict.insert(name, BaselineEntry { cell, ops, skeleton });
        }
        Ok(dict)
    }
}

/// The sampler for the search space of `closest_task`: its stored node
/// count and operation set, or all ten operations when `full_space` is set
/// (node count from the entry if present, else 4).
pub fn search_space_for(dict: &BaselineDictionary, closest_task: &str, full_space: bool) -> Result<CellSampler> {
    match (dict.get(closest_task), full_space) {
        (Some(e), false) => CellSampler::new(e.cell.num_nodes(), &e.ops),
        (Some(e), true) => CellSampler::full(e.cell.num_nodes()),
        (None, true) => CellSampler::full(4),
        (None, false) => Err(Error::UnknownTask(closest_task.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(n: usize, edges: &[(usize, usize, &str)]) -> CellDraft {
        CellDraft {
            num_nodes: n,
            edges: edges.iter().map(|(i, j, o)| (*i, *j, o.to_string())).collect(),
        }
    }

    #[test]
    fn complete_three_node_cell_validates() {
        assert!(validate(&draft(3, &[(0, 1, "conv3x3"), (0, 2, "zero"), (1, 2, "identity")])).is_ok());
    }

    #[test]
    fn missing_edge_is_not_dense() {
        let v = validate(&draft(3, &[(0, 1, "conv3x3"), (1, 2, "identity")])).unwrap_err();
        assert!(v.iter().any(|x| x.to_string().contains("not densely connected")));
    }

    #[test]
    fn unknown_op_and_backward_edge() {
        let v = validate(&draft(2, &[(0, 1, "conv9x9")])).unwrap_err();
        assert!(matches!(&v[0], Violation::UnknownOperation { name, .. } if name == "conv9x9"));
        let v = validate(&draft(2, &[(1, 0, "zero")])).unwrap_err();
        assert!(v.contains(&Violation::BackwardEdge(1, 0)));
    }

    #[test]
    fn counts() {
        assert_eq!(count_cells(2, 1).unwrap(), CellCount::Exact(1));
        assert_eq!(count_cells(3, 2).unwrap(), CellCount::Exact(8));
        assert_eq!(count_cells(4, 10).unwrap(), CellCount::Exact(1_000_000));
        // 10^15 edges-worth: n = 6 gives 15 edges, 10^15 fits; n=6, m=32 does not.
        assert_eq!(
            count_cells(6, 32).unwrap(),
            CellCount::Big(BigUint::from(32u32).pow(15).to_string())
        );
        assert!(count_cells(1, 3).is_err());
    }

    #[test]
    fn exponential_expression_disagrees_with_enumeration() {
        assert!((exponential_count_expression(3, 2) - 2.0 * 3f64.exp()).abs() < 1e-12);
        assert_ne!(exponential_count_expression(3, 2).round() as u64, 8);
    }

    #[test]
    fn singleton_op_set_and_determinism() {
        let c = sample_cell(4, &[OperationKind::Identity], 3).unwrap();
        assert!(c.is_all(OperationKind::Identity));
        let ops = &OperationKind::ALL;
        assert_eq!(sample_cell(4, ops, 11).unwrap(), sample_cell(4, ops, 11).unwrap());
        assert!(sample_cell(3, &[], 0).is_err());
    }

    #[test]
    fn op_names_round_trip() {
        for op in OperationKind::ALL {
            assert_eq!(op.name().parse::<OperationKind>().unwrap(), op);
        }
        assert_eq!(
            "avepool3x3".parse::<OperationKind>().unwrap(),
            OperationKind::AvgPool3x3
        );
        assert_eq!(
            "dil-conv5x5".parse::<OperationKind>().unwrap(),
            OperationKind::DilConv5x5
        );
    }

    #[test]
    fn dictionary_restricts_space() {
        let mut dict = BaselineDictionary::default();
        let ops = vec![OperationKind::Conv3x3, OperationKind::Identity];
        let cell = sample_cell(4, &ops, 1).unwrap();
        dict.insert(
            "a",
            BaselineEntry {
                cell,
                ops: ops.clone(),
                skeleton: Skeleton::default(),
            },
        );
        let s = search_space_for(&dict, "a", false).unwrap();
        assert_eq!(s.space_size(), CellCount::Exact(64));
        for seed in 0..50 {
            assert!(s.sample(seed).operations().iter().all(|o| ops.contains(o)));
        }
        assert!(matches!(
            search_space_for(&dict, "b", false),
            Err(Error::UnknownTask(_))
        ));
        assert_eq!(search_space_for(&dict, "a", true).unwrap().ops().len(), 10);
        let parsed = BaselineDictionary::parse(&dict.serialize()).unwrap();
        assert_eq!(parsed, dict);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_cell("cell v1\nnodes 2\nedge 0 x zero\n").unwrap_err();
        assert!(matches!(err, Error::CellFormat { line: 3, .. }), "{err}");
        assert!(parse_cell("cell v2\n").is_err());
    }

    #[test]
    fn instantiate_rejects_too_small_input() {
        let sk = Skeleton {
            stages: vec![Stage::Reduce, Stage::Reduce, Stage::Reduce],
            ..Skeleton::default()
        };
        let cell = CellSpec::uniform(2, OperationKind::Identity).unwrap();
        assert!(instantiate(&sk, &cell, &[1, 4, 4], 2).is_err());
        assert!(instantiate(&sk, &cell, &[1, 8, 8], 2).is_ok());
    }
}
