//! Relaxed-mixture candidate search and the outer search loop.
//!
//! A candidate set `C` is relaxed into the mixture `m(x) = sum_c p_c z_c(x)`
//! with `p = softmax(alpha)` over the candidates' logits `z_c`. Candidate
//! weights descend the training loss of the mixture; `alpha` descends the
//! validation loss using the closed-form gradient
//! `dL/d alpha_c = p_c <dL/dm, z_c - m>`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fisher::{self, DistanceProtocol, FimData};
use crate::graph::{cross_entropy, ComputeGraph};
use crate::networks::{self, BatchSchedule, NetworkKind, NetworkSpec, Optimizer, OptimizerState, TrainConfig};
use crate::search_space::{instantiate, search_space_for, BaselineDictionary, CellSampler, CellSpec, Skeleton};
use crate::tasks::{Samples, Task};
use crate::tensor::{one_hot, Tensor, TensorMap};

/// Consecutive rounds the incumbent must survive before the outer loop stops.
pub const INCUMBENT_PATIENCE: usize = 3;

const VAL_ORDER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct FuseConfig {
    /// Fresh candidates sampled per outer round.
    pub num_candidates: usize,
    /// Iterations between two alpha-convergence checks.
    pub inner_steps: usize,
    /// Convergence when the largest alpha change over `inner_steps`
    /// iterations falls below this.
    pub alpha_tol: f64,
    pub max_iters: usize,
    /// Optimizer for candidate weights.
    pub weight_optimizer: Optimizer,
    /// Plain gradient-descent step on alpha.
    pub alpha_lr: f64,
    /// Maximum number of outer rounds.
    pub outer_budget: usize,
    /// Per-class fraction of the training split held out for validation.
    pub val_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            num_candidates: 2,
            inner_steps: 10,
            alpha_tol: 1e-3,
            max_iters: 200,
            weight_optimizer: Optimizer::adam(1e-2),
            alpha_lr: 0.5,
            outer_budget: 3,
            val_fraction: 0.2,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl FuseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::invalid("num_candidates must be at least 1"));
        }
        if self.inner_steps == 0 || self.max_iters == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "inner_steps, max_iters and batch_size must be at least 1",
            ));
        }
        if !(self.alpha_tol > 0.0) || !(self.alpha_lr > 0.0) || !self.alpha_lr.is_finite() {
            return Err(Error::invalid("alpha_tol and alpha_lr must be positive"));
        }
        if self.outer_budget == 0 {
            return Err(Error::invalid("outer budget must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        TrainConfig {
            optimizer: self.weight_optimizer,
            batch_size: self.batch_size,
            ..TrainConfig::default()
        }
        .validate()
    }
}

/// An instantiated network taking part in a search.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub spec: NetworkSpec,
    graph: ComputeGraph,
}

impl Candidate {
    /// Freshly initialized network for `spec`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let graph = spec.build_graph(seed)?;
        Ok(Self { spec, graph })
    }

    /// A cell placed into `skeleton`, freshly initialized.
    pub fn cell(
        skeleton: &Skeleton,
        cell: &CellSpec,
        input_shape: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(instantiate(skeleton, cell, input_shape, num_classes)?, seed)
    }

    /// Network for `spec` carrying existing weights.
    pub fn with_params(spec: NetworkSpec, params: TensorMap) -> Result<Self> {
        let mut graph = spec.build_graph(0)?;
        graph.set_params(params)?;
        Ok(Self { spec, graph })
    }

    pub fn params(&self) -> &TensorMap {
        self.graph.params()
    }

    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    /// The searched cell, for cell networks.
    pub fn cell_spec(&self) -> Option<&CellSpec> {
        match &self.spec.kind {
            NetworkKind::CellNetwork { cell, .. } => Some(cell),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        self.cell_spec()
            .map_or_else(|| self.spec.to_string(), CellSpec::compact)
    }
}

/// Numerically stable softmax.
pub fn softmax(alpha: &[f64]) -> Vec<f64> {
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn mix(outputs: &[Tensor], p: &[f64]) -> Tensor {
    let mut m = vec![0.0; outputs[0].len()];
    for (z, &w) in outputs.iter().zip(p) {
        for (mv, zv) in m.iter_mut().zip(z.data()) {
            *mv += w * zv;
        }
    }
    Tensor::from_parts(outputs[0].shape().to_vec(), m)
}

/// `sum_c softmax(alpha)_c * outputs[c]`.
pub fn relax(outputs: &[Tensor], alpha: &[f64]) -> Result<Tensor> {
    if outputs.is_empty() || outputs.len() != alpha.len() {
        return Err(Error::invalid(format!(
            "{} outputs for {} mixture weights",
            outputs.len(),
            alpha.len()
        )));
    }
    if let Some(z) = outputs.iter().find(|z| z.shape() != outputs[0].shape()) {
        return Err(Error::shape(format!(
            "candidate outputs {:?} vs {:?}",
            z.shape(),
            outputs[0].shape()
        )));
    }
    Ok(mix(outputs, &softmax(alpha)))
}

/// Cross-entropy of the mixture and its gradient w.r.t. `alpha`.
pub fn alpha_gradient(outputs: &[Tensor], alpha: &[f64], target: &Tensor) -> Result<(f64, Vec<f64>)> {
    let m = relax(outputs, alpha)?;
    if target.shape() != m.shape() {
        return Err(Error::shape(format!(
            "target {:?} vs mixture {:?}",
            target.shape(),
            m.shape()
        )));
    }
    let p = softmax(alpha);
    let (loss, gm) = cross_entropy(&m, target);
    Ok((loss, alpha_grad_from(outputs, &p, &m, &gm)))
}

fn alpha_grad_from(outputs: &[Tensor], p: &[f64], m: &Tensor, gm: &Tensor) -> Vec<f64> {
    outputs
        .iter()
        .zip(p)
        .map(|(z, pc)| {
            let dot: f64 = gm
                .data()
                .iter()
                .zip(z.data().iter().zip(m.data()))
                .map(|(g, (zv, mv))| g * (zv - mv))
                .sum();
            pc * dot
        })
        .collect()
}

/// Result of one relaxed-mixture search.
#[derive(Debug, Clone)]
pub struct FuseOutcome {
    pub winner: usize,
    /// Final mixture logits; excluded candidates hold `-inf`.
    pub alpha: Vec<f64>,
    pub candidates: Vec<Candidate>,
    pub excluded: Vec<bool>,
    /// Each candidate's own accuracy on the validation split.
    pub val_accuracy: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FuseOutcome {
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.alpha)
    }

    pub fn winning_candidate(&self) -> &Candidate {
        &self.candidates[self.winner]
    }
}

/// Per-class validation split of `data`.
pub fn split_validation(data: &Samples, num_classes: usize, fraction: f64) -> Result<(Samples, Samples)> {
    let (train, val) = data.split_per_class(fraction, num_classes);
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyData(format!(
            "validation fraction {fraction} leaves an empty split of {} samples",
            data.len()
        )));
    }
    Ok((train, val))
}

/// Runs the relaxed search on the task's training split, holding out
/// `cfg.val_fraction` per class for the alpha updates.
pub fn fuse(candidates: Vec<Candidate>, task: &Task, cfg: &FuseConfig) -> Result<FuseOutcome> {
    let (train, val) = split_validation(&task.data.train, task.num_classes, cfg.val_fraction)?;
    fuse_split(candidates, &train, &val, cfg)
}

struct Mixture<'a> {
    candidates: &'a mut [Candidate],
    active: &'a mut [bool],
    alpha: &'a [f64],
}

impl Mixture<'_> {
    fn weights(&self) -> Vec<f64> {
        let live: Vec<f64> = self
            .alpha
            .iter()
            .zip(self.active.iter())
            .filter(|(_, a)| **a)
            .map(|(v, _)| *v)
            .collect();
        let p = softmax(&live);
        let mut it = p.into_iter();
        self.active
            .iter()
            .map(|&a| if a { it.next().unwrap() } else { 0.0 })
            .collect()
    }

    /// Outputs of live candidates; candidates producing non-finite values
    /// are excluded on the spot.
    fn outputs(&mut self, x: &Tensor, cache: bool) -> Result<Vec<Option<Tensor>>> {
        let mut out = Vec::with_capacity(self.candidates.len());
        for (c, active) in self.candidates.iter_mut().zip(self.active.iter_mut()) {
            if !*active {
                out.push(None);
                continue;
            }
            let z = if cache {
                c.graph.forward_output(x)
            } else {
                c.graph.predict(x)
            };
            match z {
                Ok(z) if z.is_finite() => out.push(Some(z)),
                Ok(_) | Err(Error::NonFinite(_)) => {
                    *active = false;
                    out.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        if !self.active.iter().any(|a| *a) {
            return Err(Error::Search("every candidate diverged".into()));
        }
        Ok(out)
    }
}

fn live(outputs: &[Option<Tensor>], p: &[f64]) -> (Vec<Tensor>, Vec<f64>, Vec<usize>) {
    let mut zs = Vec::new();
    let mut ps = Vec::new();
    let mut idx = Vec::new();
    for (i, z) in outputs.iter().enumerate() {
        if let Some(z) = z {
            zs.push(z.clone());
            ps.push(p[i]);
            idx.push(i);
        }
    }
    (zs, ps, idx)
}

/// [`fuse`] on an explicit train/validation split.
pub fn fuse_split(
    mut candidates: Vec<Candidate>,
    train: &Samples,
    val: &Samples,
    cfg: &FuseConfig,
) -> Result<FuseOutcome> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::invalid("fuse needs at least one candidate"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyData(
            "fuse needs non-empty train and validation splits".into(),
        ));
    }
    let out_shape = candidates[0].graph.output_shape().to_vec();
    for c in &candidates {
        if c.graph.output_shape() != out_shape.as_slice() {
            return Err(Error::shape(format!(
                "candidate outputs {:?} vs {:?}",
                c.graph.output_shape(),
                out_shape
            )));
        }
        if c.graph.input_shape() != train.sample_shape() {
            return Err(Error::shape(format!(
                "candidate input {:?} vs data {:?}",
                c.graph.input_shape(),
                train.sample_shape()
            )));
        }
    }
    let width = out_shape[0];
    let train_targets = one_hot(&train.labels, width)?;
    let val_targets = one_hot(&val.labels, width)?;

    let n = candidates.len();
    let mut alpha = vec![1.0 / n as f64; n];
    let mut active = vec![true; n];
    let mut opts: Vec<OptimizerState> = (0..n).map(|_| OptimizerState::new(cfg.weight_optimizer)).collect();
    let mut train_sched = BatchSchedule::new(train.len(), cfg.batch_size, cfg.seed);
    let mut val_sched = BatchSchedule::new(val.len(), cfg.batch_size, cfg.seed ^ VAL_ORDER_SALT);
    let mut train_queue = std::collections::VecDeque::new();
    let mut val_queue = std::collections::VecDeque::new();
    let mut epoch = 0usize;
    let mut checkpoint = alpha.clone();
    let (mut train_losses, mut val_losses) = (Vec::new(), Vec::new());
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        if train_queue.is_empty() {
            if !train_losses.is_empty() {
                epoch += 1;
            }
            train_queue.extend(train_sched.next_epoch());
            for o in &mut opts {
                o.set_epoch(epoch);
            }
        }
        if val_queue.is_empty() {
            val_queue.extend(val_sched.next_epoch());
        }
        let batch = train_queue.pop_front().unwrap();
        let (x, y) = (train.inputs.gather(&batch), train_targets.gather(&batch));

        // Weight step on the training loss of the mixture.
        let mut mixture = Mixture {
            candidates: &mut candidates,
            active: &mut active,
            alpha: &alpha,
        };
        let outputs = mixture.outputs(&x, true)?;
        let p = mixture.weights();
        let (zs, ps, idx) = live(&outputs, &p);
        let m = mix(&zs, &ps);
        let (loss, gm) = cross_entropy(&m, &y);
        train_losses.push(loss);
        for (&i, &pc) in idx.iter().zip(&ps) {
            let mut g = gm.clone();
            g.scale_assign(pc);
            let grads = match candidates[i].graph.backward_from_output(&g) {
                Ok(g) => g,
                Err(Error::NonFinite(_)) => {
                    active[i] = false;
                    continue;
                }
                Err(e) => return Err(e),
            };
            opts[i].step(candidates[i].graph.params_mut(), &grads);
            if candidates[i].graph.params().values().any(|t| !t.is_finite()) {
                active[i] = false;
            }
        }
        if !active.iter().any(|a| *a) {
            return Err(Error::Search("every candidate diverged".into()));
        }

        // Alpha step on the validation loss.
        let vb = val_queue.pop_front().unwrap();
        let (vx, vy) = (val.inputs.gather(&vb), val_targets.gather(&vb));
        let mut mixture = Mixture {
            candidates: &mut candidates,
            active: &mut active,
            alpha: &alpha,
        };
        let outputs = mixture.outputs(&vx, false)?;
        let p = mixture.weights();
        let (zs, ps, idx) = live(&outputs, &p);
        let m = mix(&zs, &ps);
        let (vloss, gm) = cross_entropy(&m, &vy);
        val_losses.push(vloss);
        for (&i, g) in idx.iter().zip(alpha_grad_from(&zs, &ps, &m, &gm)) {
            alpha[i] -= cfg.alpha_lr * g;
        }
        iterations += 1;

        if iterations % cfg.inner_steps == 0 {
            let moved = (0..n)
                .filter(|&i| active[i])
                .map(|i| (alpha[i] - checkpoint[i]).abs())
                .fold(0.0, f64::max);
            if moved < cfg.alpha_tol {
                converged = true;
                break;
            }
            checkpoint.clone_from(&alpha);
        }
    }

    for (a, &live) in alpha.iter_mut().zip(&active) {
        if !live {
            *a = f64::NEG_INFINITY;
        }
    }
    let winner = (0..n)
        .filter(|&i| active[i])
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if alpha[b] >= alpha[i] => Some(b),
            _ => Some(i),
        })
        .ok_or_else(|| Error::Search("every candidate diverged".into()))?;
    let val_accuracy = candidates
        .iter()
        .zip(&active)
        .map(|(c, &live)| {
            if live {
                individual_accuracy(&c.graph, val, width)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FuseOutcome {
        winner,
        alpha,
        candidates,
        excluded: active.iter().map(|a| !a).collect(),
        val_accuracy,
        train_losses,
        val_losses,
        iterations,
        converged,
    })
}

fn individual_accuracy(graph: &ComputeGraph, data: &Samples, width: usize) -> Result<f64> {
    let preds = networks::predict_classes(graph, &data.inputs, width)?;
    Ok(networks::accuracy(&preds, &data.labels))
}

/// What happened in one outer round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Candidate labels; index 0 is the incumbent when one existed.
    pub cells: Vec<String>,
    pub alpha: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub winner: usize,
    pub had_incumbent: bool,
    pub iterations: usize,
}

impl RoundRecord {
    pub fn incumbent_kept(&self) -> bool {
        self.had_incumbent && self.winner == 0
    }
}

#[derive(Debug, Clone)]
pub struct RoundsOutcome {
    pub incumbent: Candidate,
    pub rounds: Vec<RoundRecord>,
    /// Fresh candidates evaluated across all rounds.
    pub evaluations: usize,
}

/// Outer loop: each round samples `cfg.num_candidates` fresh cells, runs
/// [`fuse_split`] over the incumbent (kept at index 0 with its trained
/// weights) plus the fresh ones, and adopts the winner. Stops after
/// `cfg.outer_budget` rounds or once the incumbent survives
/// [`INCUMBENT_PATIENCE`] consecutive rounds.
pub fn search_rounds(
    sampler: &CellSampler,
    skeleton: &Skeleton,
    train: &Samples,
    val: &Samples,
    num_classes: usize,
    incumbent: Option<Candidate>,
    cfg: &FuseConfig,
) -> Result<RoundsOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut incumbent = incumbent;
    let mut rounds = Vec::new();
    let mut evaluations = 0;
    let mut unchanged = 0;
    for round in 0..cfg.outer_budget {
        let mut pool = Vec::with_capacity(cfg.num_candidates + 1);
        let had_incumbent = incumbent.is_some();
        pool.extend(incumbent.take());
        for _ in 0..cfg.num_candidates {
            let cell = sampler.sample_with(&mut rng);
            let seed: u64 = rng.random();
            pool.push(Candidate::cell(
                skeleton,
                &cell,
                train.sample_shape(),
                num_classes,
                seed,
            )?);
        }
        evaluations += cfg.num_candidates;
        let round_cfg = FuseConfig {
            seed: cfg.seed.wrapping_add(round as u64 + 1),
            ..cfg.clone()
        };
        let out = fuse_split(pool, train, val, &round_cfg)?;
        let record = RoundRecord {
            round,
            cells: out.candidates.iter().map(Candidate::label).collect(),
            alpha: out.alpha.clone(),
            val_accuracy: out.val_accuracy.clone(),
            winner: out.winner,
            had_incumbent,
            iterations: out.iterations,
        };
        unchanged = if record.incumbent_kept() { unchanged + 1 } else { 0 };
        rounds.push(record);
        let winner = out.winner;
        incumbent = out.candidates.into_iter().nth(winner);
        if unchanged >= INCUMBENT_PATIENCE {
            break;
        }
    }
    Ok(RoundsOutcome {
        incumbent: incumbent.expect("at least one round ran"),
        rounds,
        evaluations,
    })
}

/// Outcome of a full search, in a form that can be written and compared.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub method: String,
    pub target: String,
    /// Fresh candidate evaluations allowed.
    pub budget: usize,
    pub closest_task: Option<String>,
    /// Mean distance from each baseline to the target.
    pub distances: Vec<(String, f64)>,
    pub rounds: Vec<RoundRecord>,
    pub best_cell: CellSpec,
    pub skeleton: String,
    /// Retrained winner on the held-out validation split.
    pub val_accuracy: f64,
    /// Retrained winner on the target's test split.
    pub test_accuracy: f64,
    pub parameter_count: usize,
    pub evaluations: usize,
    pub seconds: f64,
}

impl SearchReport {
    pub fn closest_distance(&self) -> Option<f64> {
        let name = self.closest_task.as_ref()?;
        self.distances.iter().find(|(n, _)| n == name).map(|(_, d)| *d)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "method: {}", self.method).unwrap();
        writeln!(s, "target: {}", self.target).unwrap();
        writeln!(s, "budget: {}", self.budget).unwrap();
        if let Some(c) = &self.closest_task {
            writeln!(s, "closest_task: {c}").unwrap();
            if let Some(d) = self.closest_distance() {
                writeln!(s, "closest_distance: {d:.6}").unwrap();
            }
        }
        for (name, d) in &self.distances {
            writeln!(s, "distance {name}: {d:.6}").unwrap();
        }
        for r in &self.rounds {
            writeln!(
                s,
                "round {} incumbent_kept={} iterations={}",
                r.round,
                r.incumbent_kept(),
                r.iterations
            )
            .unwrap();
            for (i, cell) in r.cells.iter().enumerate() {
                writeln!(
                    s,
                    "  candidate {i} cell={cell} alpha={:.6} val_accuracy={:.6}{}",
                    r.alpha[i],
                    r.val_accuracy[i],
                    if i == r.winner { " winner" } else { "" }
                )
                .unwrap();
            }
        }
        writeln!(s, "skeleton: {}", self.skeleton).unwrap();
        writeln!(s, "best_cell: {}", self.best_cell.compact()).unwrap();
        writeln!(s, "val_accuracy: {:.6}", self.val_accuracy).unwrap();
        writeln!(s, "test_accuracy: {:.6}", self.test_accuracy).unwrap();
        writeln!(s, "parameter_count: {}", self.parameter_count).unwrap();
        writeln!(s, "evaluations: {}", self.evaluations).unwrap();
        writeln!(s, "seconds: {:.3}", self.seconds).unwrap();
        s
    }

    /// Per-candidate rows without timing, so reruns are byte-identical.
    pub fn candidates_csv(&self) -> String {
        let mut s = String::from("round,index,cell,alpha,val_accuracy,winner\n");
        for r in &self.rounds {
            for (i, cell) in r.cells.iter().enumerate() {
                writeln!(
                    s,
                    "{},{i},{cell},{:.6},{:.6},{}",
                    r.round,
                    r.alpha[i],
                    r.val_accuracy[i],
                    u8::from(i == r.winner)
                )
                .unwrap();
            }
        }
        s
    }

    /// Reads the summary fields back from [`SearchReport::to_text`] output.
    /// Round details are not recovered.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut distances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with("round ") || line.starts_with("  ") || line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(": ").ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key: value`, found {line:?}"),
            })?;
            if let Some(name) = k.strip_prefix("distance ") {
                let d = v.parse().map_err(|_| Error::Config {
                    line: i + 1,
                    message: format!("bad distance {v:?}"),
                })?;
                distances.push((name.to_string(), d));
            } else {
                fields.insert(k.to_string(), (i + 1, v.to_string()));
            }
        }
        let get = |k: &str| -> Result<&(usize, String)> {
            fields.get(k).ok_or_else(|| Error::Config {
                line: 0,
                message: format!("report is missing `{k}`"),
            })
        };
        fn num<T: std::str::FromStr>(entry: &(usize, String), key: &str) -> Result<T> {
            entry.1.parse().map_err(|_| Error::Config {
                line: entry.0,
                message: format!("bad value for `{key}`: {:?}", entry.1),
            })
        }
        let cell_text = &get("best_cell")?.1;
        Ok(Self {
            method: get("method")?.1.clone(),
            target: get("target")?.1.clone(),
            budget: num(get("budget")?, "budget")?,
            closest_task: fields.get("closest_task").map(|v| v.1.clone()),
            distances,
            rounds: Vec::new(),
            best_cell: parse_compact(cell_text).map_err(|e| Error::Config {
                line: get("best_cell").map(|v| v.0).unwrap_or(0),
                message: e.to_string(),
            })?,
            skeleton: get("skeleton")?.1.clone(),
            val_accuracy: num(get("val_accuracy")?, "val_accuracy")?,
            test_accuracy: num(get("test_accuracy")?, "test_accuracy")?,
            parameter_count: num(get("parameter_count")?, "parameter_count")?,
            evaluations: num(get("evaluations")?, "evaluations")?,
            seconds: num(get("seconds")?, "seconds")?,
        })
    }
}

/// Inverse of [`CellSpec::compact`].
pub fn parse_compact(text: &str) -> Result<CellSpec> {
    let bad = || Error::CellFormat {
        line: 1,
        message: format!("bad compact cell {text:?}"),
    };
    let (n, edges) = text.split_once(':').ok_or_else(bad)?;
    let num_nodes = n.parse().map_err(|_| bad())?;
    let mut draft = crate::search_space::CellDraft {
        num_nodes,
        edges: Vec::new(),
    };
    for e in edges.split(',').filter(|e| !e.is_empty()) {
        let (ij, op) = e.split_once('=').ok_or_else(bad)?;
        let (i, j) = ij.split_once('-').ok_or_else(bad)?;
        draft.edges.push((
            i.parse().map_err(|_| bad())?,
            j.parse().map_err(|_| bad())?,
            op.to_string(),
        ));
    }
    CellSpec::from_draft(&draft)
}

/// Settings for the full search pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct NasConfig {
    pub fuse: FuseConfig,
    /// ε-network protocol used to measure baseline-to-target distances.
    pub distance: DistanceProtocol,
    /// Training used to retrain and score the final cell.
    pub final_train: TrainConfig,
    /// Search all ten operations instead of the closest task's set.
    pub full_space: bool,
}

/// Closest baseline and the search space it induces.
#[derive(Debug, Clone)]
pub struct ReducedSpace {
    pub distances: Vec<(String, f64)>,
    pub closest: String,
    pub sampler: CellSampler,
    pub skeleton: Skeleton,
}

/// Mean distance from every baseline to `target` over the protocol's
/// trials; networks for baseline `i` use task index `i` and the target uses
/// index `baselines.len()`, matching [`fisher::distance_table`] on
/// `baselines ++ [target]`.
pub fn baseline_distances(
    baselines: &[Task],
    target: &Task,
    protocol: &DistanceProtocol,
) -> Result<Vec<(String, f64)>> {
    if baselines.is_empty() {
        return Err(Error::invalid("baseline set is empty"));
    }
    if protocol.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let mut all: Vec<Task> = baselines.to_vec();
    all.push(target.clone());
    let mut sums = vec![0.0; baselines.len()];
    let mut ok = 0usize;
    for trial in 0..protocol.trials {
        let nets = match fisher::train_trial_networks(&all, protocol, trial) {
            Ok((nets, _)) => nets,
            Err(Error::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let samples = match protocol.fim_data {
            FimData::Test => &target.data.test,
            FimData::Train => &target.data.train,
        };
        let f_target = fisher::empirical_fim_diag(&nets[baselines.len()], samples)?;
        for (i, net) in nets[..baselines.len()].iter().enumerate() {
            sums[i] += fisher::distance_between(&fisher::empirical_fim_diag(net, samples)?, &f_target)?;
        }
        ok += 1;
    }
    if ok * 2 < protocol.trials || ok == 0 {
        return Err(Error::Search(format!(
            "{} of {} distance trials failed",
            protocol.trials - ok,
            protocol.trials
        )));
    }
    Ok(baselines
        .iter()
        .zip(sums)
        .map(|(t, s)| (t.name.clone(), s / ok as f64))
        .collect())
}

/// Distances, argmin and the closest task's space.
pub fn reduced_space(
    baselines: &[Task],
    target: &Task,
    dict: &BaselineDictionary,
    protocol: &DistanceProtocol,
    full_space: bool,
) -> Result<ReducedSpace> {
    if let Some(t) = baselines.iter().find(|t| dict.get(&t.name).is_none()) {
        return Err(Error::UnknownTask(t.name.clone()));
    }
    let distances = baseline_distances(baselines, target, protocol)?;
    let closest = distances
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .map(|(_, (n, _))| n.clone())
        .expect("non-empty baselines");
    let sampler = search_space_for(dict, &closest, full_space)?;
    let skeleton = dict.get(&closest).expect("checked above").skeleton.clone();
    Ok(ReducedSpace {
        distances,
        closest,
        sampler,
        skeleton,
    })
}

/// Retrains `cell` from scratch and scores it on validation and test data.
fn score_cell(
    skeleton: &Skeleton,
    cell: &CellSpec,
    target: &Task,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
) -> Result<(f64, f64, usize)> {
    let spec = instantiate(skeleton, cell, target.input_shape(), target.num_classes)?;
    let mut graph = spec.build_graph(cfg.seed)?;
    networks::train_graph(&mut graph, train, cfg)?;
    let val_acc = individual_accuracy(&graph, val, target.num_classes)?;
    let test_acc = individual_accuracy(&graph, &target.data.test, target.num_classes)?;
    Ok((val_acc, test_acc, spec.parameter_count()?))
}

/// Full pipeline: distances to every baseline, argmin, restricted space,
/// incumbent rounds, then retraining of the final cell.
pub fn nas_main(baselines: &[Task], target: &Task, dict: &BaselineDictionary, cfg: &NasConfig) -> Result<SearchReport> {
    let start = Instant::now();
    cfg.fuse.validate()?;
    let space = reduced_space(baselines, target, dict, &cfg.distance, cfg.full_space)?;
    nas_in_space(&space, target, cfg, start)
}

/// The search half of [`nas_main`] for an already chosen space.
pub fn nas_in_space(space: &ReducedSpace, target: &Task, cfg: &NasConfig, start: Instant) -> Result<SearchReport> {
    let (train, val) = split_validation(&target.data.train, target.num_classes, cfg.fuse.val_fraction)?;
    let out = search_rounds(
        &space.sampler,
        &space.skeleton,
        &train,
        &val,
        target.num_classes,
        None,
        &cfg.fuse,
    )?;
    let best = out.incumbent.cell_spec().expect("cell candidates only").clone();
    let (val_accuracy, test_accuracy, parameter_count) =
        score_cell(&space.skeleton, &best, target, &train, &val, &cfg.final_train)?;
    Ok(SearchReport {
        method: "fuse".into(),
        target: target.name.clone(),
        budget: cfg.fuse.outer_budget * cfg.fuse.num_candidates,
        closest_task: Some(space.closest.clone()),
        distances: space.distances.clone(),
        rounds: out.rounds,
        best_cell: best,
        skeleton: space.skeleton.describe(),
        val_accuracy,
        test_accuracy,
        parameter_count,
        evaluations: out.evaluations,
        seconds: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSearchConfig {
    pub train: TrainConfig,
    pub val_fraction: f64,
    /// Seed for cell sampling.
    pub seed: u64,
}

/// Trains `budget` uniformly sampled cells independently and keeps the one
/// with the best validation accuracy (lowest sample index on ties).
/// Diverging candidates are skipped.
pub fn random_search(
    sampler: &CellSampler,
    skeleton: &Skeleton,
    target: &Task,
    budget: usize,
    cfg: &RandomSearchConfig,
) -> Result<SearchReport> {
    let start = Instant::now();
    let (train, val) = split_validation(&target.data.train, target.num_classes, cfg.val_fraction)?;
    let mut report = random_search_by(sampler, budget, cfg.seed, |cell| {
        score_cell(skeleton, cell, target, &train, &val, &cfg.train)
    })?;
    report.target = target.name.clone();
    report.skeleton = skeleton.describe();
    report.seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(report)
}

/// Random search with a caller-supplied scorer returning
/// `(validation accuracy, test accuracy, parameter count)`.
pub fn random_search_by<F>(sampler: &CellSampler, budget: usize, seed: u64, mut score: F) -> Result<SearchReport>
where
    F: FnMut(&CellSpec) -> Result<(f64, f64, usize)>,
{
    let start = Instant::now();
    if budget == 0 {
        return Err(Error::invalid("random search budget must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, f64, usize, CellSpec)> = None;
    let mut record = RoundRecord {
        round: 0,
        cells: Vec::new(),
        alpha: Vec::new(),
        val_accuracy: Vec::new(),
        winner: 0,
        had_incumbent: false,
        iterations: 0,
    };
    for _ in 0..budget {
        let cell = sampler.sample_with(&mut rng);
        match score(&cell) {
            Ok((v, t, params)) => {
                record.cells.push(cell.compact());
                record.alpha.push(0.0);
                record.val_accuracy.push(v);
                if best.as_ref().is_none_or(|b| v > b.0) {
                    record.winner = record.cells.len() - 1;
                    best = Some((v, t, params, cell));
                }
            }
            Err(Error::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let (val_accuracy, test_accuracy, parameter_count, best_cell) =
        best.ok_or_else(|| Error::Search("every random candidate diverged".into()))?;
    Ok(SearchReport {
        method: "random".into(),
        target: String::new(),
        budget,
        closest_task: None,
        distances: Vec::new(),
        rounds: vec![record],
        best_cell,
        skeleton: String::new(),
        val_accuracy,
        test_accuracy,
        parameter_count,
        evaluations: budget,
        seconds: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
    })
}

/// Side-by-side summary of two searches on the same task and budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub target: String,
    pub budget: usize,
    pub rows: Vec<(String, f64, f64, usize, f64)>,
    /// `first - second` for validation accuracy, test accuracy, parameters, seconds.
    pub deltas: (f64, f64, i64, f64),
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut s = format!("target: {}\nbudget: {}\n", self.target, self.budget);
        s.push_str("method,val_accuracy,test_accuracy,parameters,seconds\n");
        for (m, v, t, p, sec) in &self.rows {
            writeln!(s, "{m},{v:.6},{t:.6},{p},{sec:.3}").unwrap();
        }
        let (dv, dt, dp, ds) = self.deltas;
        writeln!(s, "delta,{dv:.6},{dt:.6},{dp},{ds:.3}").unwrap();
        s
    }
}

pub fn compare_reports(first: &SearchReport, second: &SearchReport) -> Result<Comparison> {
    if first.target != second.target || first.budget != second.budget {
        return Err(Error::invalid(format!(
            "reports differ: target {} vs {}, budget {} vs {}",
            first.target, second.target, first.budget, second.budget
        )));
    }
    let row = |r: &SearchReport| {
        (
            r.method.clone(),
            r.val_accuracy,
            r.test_accuracy,
            r.parameter_count,
            r.seconds,
        )
    };
    Ok(Comparison {
        target: first.target.clone(),
        budget: first.budget,
        rows: vec![row(first), row(second)],
        deltas: (
            first.val_accuracy - second.val_accuracy,
            first.test_accuracy - second.test_accuracy,
            first.parameter_count as i64 - second.parameter_count as i64,
            first.seconds - second.seconds,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relax_examples() {
        let a = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let b = t(&[1, 3], &[3.0, 0.0, -1.0]);
        assert_eq!(relax(&[a.clone()], &[0.7]).unwrap(), a);
        assert_eq!(
            relax(&[a.clone(), b.clone()], &[0.3, 0.3]).unwrap().data(),
            &[2.0, 1.0, 1.0]
        );
        let p = softmax(&[2.0, 0.0, 0.0]);
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 2.0)).abs() < 1e-15);
        assert!((p[0] - 0.787).abs() < 1e-3 && (p[1] - 0.107).abs() < 1e-3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(relax(&[a, t(&[1, 2], &[0.0, 0.0])], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let outs = vec![
            t(&[2, 3], &[1.0, -0.5, 0.2, 0.3, 0.1, -1.0]),
            t(&[2, 3], &[-0.2, 0.9, 0.0, 1.5, -0.3, 0.4]),
            t(&[2, 3], &[0.5, 0.5, 0.5, -0.7, 0.2, 0.2]),
        ];
        let target = t(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let alpha = [0.3, -0.4, 0.9];
        let (_, g) = alpha_gradient(&outs, &alpha, &target).unwrap();
        for c in 0..3 {
            let h = 1e-6;
            let mut up = alpha;
            up[c] += h;
            let mut dn = alpha;
            dn[c] -= h;
            let fd = (alpha_gradient(&outs, &up, &target).unwrap().0 - alpha_gradient(&outs, &dn, &target).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-8, "component {c}: {fd} vs {}", g[c]);
        }
    }

    #[test]
    fn compact_round_trip() {
        let cell = crate::search_space::sample_cell(4, &crate::search_space::OperationKind::ALL, 3).unwrap();
        assert_eq!(parse_compact(&cell.compact()).unwrap(), cell);
        assert!(parse_compact("3:0-1=conv3x3").is_err());
    }

    #[test]
    fn config_rejects_zero_budget() {
        let cfg = FuseConfig {
            outer_budget: 0,
            ..FuseConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(FuseConfig::default().validate().is_ok());
    }
}
