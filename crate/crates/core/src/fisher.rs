//! Empirical diagonal Fisher information and the Fréchet task distance.
//!
//! For unit-trace diagonals `a`, `b` the distance is
//! `sqrt(sum_i (sqrt(a_i) - sqrt(b_i))^2) / sqrt(2)`, which lies in `[0, 1]`
//! because `||sqrt(a) - sqrt(b)||^2 = 2 - 2 sum_i sqrt(a_i b_i)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::networks::{self, NetworkSpec, TrainConfig, TrainedNetwork};
use crate::stats;
use crate::tasks::{Samples, Task};
use crate::tensor::one_hot;

const UNIT_TRACE_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    entries: Vec<f64>,
    normalized: bool,
}

impl FisherDiagonal {
    /// Unnormalized diagonal; entries must be finite and nonnegative.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some(i) = entries.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("Fisher entry {i} is {}", entries[i])));
        }
        Ok(Self {
            entries,
            normalized: false,
        })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn trace(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Multiplies every entry by `factor > 0`, dropping normalization.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.entries.iter().map(|v| v * factor).collect())
    }
}

/// Mean over samples of the squared gradient components.
pub fn fim_diag_from_gradients<I>(gradients: I) -> Result<FisherDiagonal>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for (i, g) in gradients.into_iter().enumerate() {
        accumulate_squares(&mut acc, &g, i)?;
        count += 1;
    }
    finish(acc, count)
}

fn accumulate_squares(acc: &mut Option<Vec<f64>>, g: &[f64], sample: usize) -> Result<()> {
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {j} of sample {sample}")));
    }
    let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
    if acc.len() != g.len() {
        return Err(Error::shape(format!(
            "sample {sample} gradient has {} entries, expected {}",
            g.len(),
            acc.len()
        )));
    }
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v * v;
    }
    Ok(())
}

fn finish(acc: Option<Vec<f64>>, count: usize) -> Result<FisherDiagonal> {
    let acc = acc.ok_or_else(|| Error::EmptyData("Fisher estimate needs at least one sample".into()))?;
    FisherDiagonal::new(acc.into_iter().map(|s| s / count as f64).collect())
}

/// Diagonal empirical Fisher of `net` under the cross-entropy loss on
/// `data`, in flattened parameter declaration order.
pub fn empirical_fim_diag(net: &TrainedNetwork, data: &Samples) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::EmptyData("Fisher estimate needs at least one sample".into()));
    }
    let mut graph = net.graph()?;
    let targets = one_hot(&data.labels, net.spec.num_classes)?;
    let mut acc: Option<Vec<f64>> = None;
    let mut flat = Vec::with_capacity(graph.num_params());
    graph
        .for_each_sample_grad(&data.inputs, &targets, |i, grads| {
            flat.clear();
            for t in grads.values() {
                flat.extend_from_slice(t.data());
            }
            accumulate_squares(&mut acc, &flat, i)
        })
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} while estimating Fisher")),
            other => other,
        })?;
    finish(acc, data.len())
}

pub fn normalize_unit_trace(f: &FisherDiagonal) -> Result<FisherDiagonal> {
    let trace = f.trace();
    if trace <= 0.0 || f.is_empty() {
        return Err(Error::ZeroTrace);
    }
    if f.normalized {
        return Ok(f.clone());
    }
    Ok(FisherDiagonal {
        entries: f.entries.iter().map(|v| v / trace).collect(),
        normalized: true,
    })
}

fn check_normalized(f: &FisherDiagonal) -> Result<()> {
    if !f.normalized || (f.trace() - 1.0).abs() > UNIT_TRACE_TOL {
        return Err(Error::NotNormalized);
    }
    Ok(())
}

/// Fréchet distance between two unit-trace diagonals.
pub fn frechet_distance_diag(a: &FisherDiagonal, b: &FisherDiagonal) -> Result<f64> {
    check_normalized(a)?;
    check_normalized(b)?;
    if a.len() != b.len() {
        return Err(Error::shape(format!("Fisher lengths {} vs {}", a.len(), b.len())));
    }
    let sq: f64 = a
        .entries
        .iter()
        .zip(&b.entries)
        .map(|(x, y)| {
            let d = x.max(0.0).sqrt() - y.max(0.0).sqrt();
            d * d
        })
        .sum();
    Ok((sq / 2.0).sqrt())
}

fn psd_sqrt(m: &DMatrix<f64>, which: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::shape(format!("{which} is {}x{}", m.nrows(), m.ncols())));
    }
    let sym = (m + m.transpose()) * 0.5;
    if (&sym - m).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::invalid(format!("{which} is not symmetric")));
    }
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `sqrt(tr(A + B - 2 (A B)^{1/2})) / sqrt(2)` for symmetric PSD matrices,
/// using `tr((A B)^{1/2}) = tr((A^{1/2} B A^{1/2})^{1/2})`.
pub fn frechet_distance_full(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let ra = psd_sqrt(a, "first matrix")?;
    psd_sqrt(b, "second matrix")?;
    let inner = &ra * b * &ra;
    let cross = psd_sqrt(&((&inner + inner.transpose()) * 0.5), "cross term")?;
    let t = a.trace() + b.trace() - 2.0 * cross.trace();
    Ok((t.max(0.0) / 2.0).sqrt())
}

/// Which split of the target task the Fisher matrices are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FimData {
    #[default]
    Test,
    Train,
}

impl FimData {
    fn pick(self, task: &Task) -> &Samples {
        match self {
            FimData::Test => &task.data.test,
            FimData::Train => &task.data.train,
        }
    }
}

/// Distance from a source Fisher to a target Fisher (both unnormalized).
pub fn distance_between(source: &FisherDiagonal, target: &FisherDiagonal) -> Result<f64> {
    frechet_distance_diag(&normalize_unit_trace(source)?, &normalize_unit_trace(target)?)
}

/// `d[source, target]`: both networks' Fishers are taken on the target
/// task's data with the target's labels. Not symmetric.
pub fn task_distance(source: (&Task, &TrainedNetwork), target: (&Task, &TrainedNetwork), data: FimData) -> Result<f64> {
    let (_, src_net) = source;
    let (tgt_task, tgt_net) = target;
    if src_net.spec != tgt_net.spec {
        return Err(Error::SpecMismatch(format!("{} vs {}", src_net.spec, tgt_net.spec)));
    }
    if std::ptr::eq(src_net, tgt_net) {
        return Ok(0.0);
    }
    let samples = data.pick(tgt_task);
    let f_src = empirical_fim_diag(src_net, samples)?;
    let f_tgt = empirical_fim_diag(tgt_net, samples)?;
    distance_between(&f_src, &f_tgt)
}

/// Mean and standard deviation of task distances over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub names: Vec<String>,
    /// `mean[source][target]`.
    pub mean: Vec<Vec<f64>>,
    /// Population standard deviation over successful trials.
    pub std: Vec<Vec<f64>>,
    /// Number of successful trials.
    pub trials: usize,
    pub failed_trials: usize,
    /// Per successful trial, the full `[source][target]` matrix.
    pub per_trial: Vec<Vec<Vec<f64>>>,
    /// Networks that missed the `1 - epsilon` performance bar.
    pub warnings: Vec<String>,
}

impl DistanceTable {
    fn from_trials(names: Vec<String>, per_trial: Vec<Vec<Vec<f64>>>, failed: usize, warnings: Vec<String>) -> Self {
        let k = names.len();
        let mut mean = vec![vec![0.0; k]; k];
        let mut std = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                let xs: Vec<f64> = per_trial.iter().map(|t| t[i][j]).collect();
                mean[i][j] = stats::mean(&xs);
                std[i][j] = stats::population_std(&xs);
            }
        }
        Self {
            names,
            mean,
            std,
            trials: per_trial.len(),
            failed_trials: failed,
            per_trial,
            warnings,
        }
    }

    /// Source index minimizing the mean distance to `target`, excluding
    /// the target itself (lowest index wins ties).
    pub fn closest_source(&self, target: usize) -> Option<usize> {
        closest_in(&self.mean, target)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn csv(&self, m: &[Vec<f64>]) -> String {
        let mut s = String::from("source\\target");
        for n in &self.names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in self.names.iter().zip(m) {
            s.push_str(name);
            for v in row {
                write!(s, ",{v:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn mean_csv(&self) -> String {
        self.csv(&self.mean)
    }

    pub fn std_csv(&self) -> String {
        self.csv(&self.std)
    }
}

/// Argmin over column `target` of `m`, skipping the diagonal.
pub fn closest_in(m: &[Vec<f64>], target: usize) -> Option<usize> {
    (0..m.len())
        .filter(|&i| i != target)
        .min_by(|&a, &b| m[a][target].total_cmp(&m[b][target]).then(a.cmp(&b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProtocol {
    /// Shared ε-network architecture; its head must be at least as wide as
    /// every task's class count.
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub trials: usize,
    /// Trial `t` uses init seed `seed + 1000 t + i` for task `i` and batch
    /// order seed `seed + 1000 t + 500 + i`.
    pub seed: u64,
    pub fim_data: FimData,
    pub epsilon: f64,
}

/// Seeds used for task `i` in trial `t`.
pub fn trial_seeds(base: u64, trial: usize, task: usize) -> (u64, u64) {
    let b = base.wrapping_add(1000 * trial as u64);
    (b.wrapping_add(task as u64), b.wrapping_add(500 + task as u64))
}

/// Trains one ε-network per task and trial and tabulates all pairwise
/// distances. Failed trials (divergence) are dropped; more than half
/// failing is an error.
pub fn distance_table(tasks: &[Task], protocol: &DistanceProtocol) -> Result<DistanceTable> {
    if protocol.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks"));
    }
    let shape = tasks[0].input_shape();
    if let Some(t) = tasks.iter().find(|t| t.input_shape() != shape) {
        return Err(Error::shape(format!(
            "task {} input {:?} vs {:?}",
            t.name,
            t.input_shape(),
            shape
        )));
    }
    let mut per_trial = Vec::new();
    let mut warnings = Vec::new();
    let mut failed = 0;
    for trial in 0..protocol.trials {
        match run_trial(tasks, protocol, trial, &mut warnings) {
            Ok(m) => per_trial.push(m),
            Err(Error::Diverged { .. }) | Err(Error::ZeroTrace) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if failed * 2 > protocol.trials {
        return Err(Error::Search(format!("{failed} of {} trials failed", protocol.trials)));
    }
    let names = tasks.iter().map(|t| t.name.clone()).collect();
    Ok(DistanceTable::from_trials(names, per_trial, failed, warnings))
}

/// Trains the trial's ε-networks; returns them with any ε warnings.
pub fn train_trial_networks(
    tasks: &[Task],
    protocol: &DistanceProtocol,
    trial: usize,
) -> Result<(Vec<TrainedNetwork>, Vec<String>)> {
    let mut nets = Vec::with_capacity(tasks.len());
    let mut warnings = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let (seed, batch_order_seed) = trial_seeds(protocol.seed, trial, i);
        let cfg = TrainConfig {
            seed,
            batch_order_seed,
            ..protocol.train.clone()
        };
        let net = networks::train(&protocol.spec, task, &cfg)?;
        let perf = networks::performance(&net, task)?;
        if !networks::meets_epsilon(perf, protocol.epsilon)? {
            warnings.push(format!(
                "trial {trial}: {} network accuracy {perf:.4} below 1 - epsilon = {:.4}",
                task.name,
                1.0 - protocol.epsilon
            ));
        }
        nets.push(net);
    }
    Ok((nets, warnings))
}

/// Full distance matrix for one set of trained networks.
pub fn distance_matrix(tasks: &[Task], nets: &[TrainedNetwork], fim_data: FimData) -> Result<Vec<Vec<f64>>> {
    let k = tasks.len();
    let mut m = vec![vec![0.0; k]; k];
    for (j, target) in tasks.iter().enumerate() {
        let samples = fim_data.pick(target);
        let fishers = nets
            .iter()
            .map(|n| empirical_fim_diag(n, samples))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..k {
            if i != j {
                m[i][j] = distance_between(&fishers[i], &fishers[j])?;
            }
        }
    }
    Ok(m)
}

fn run_trial(
    tasks: &[Task],
    protocol: &DistanceProtocol,
    trial: usize,
    warnings: &mut Vec<String>,
) -> Result<Vec<Vec<f64>>> {
    let (nets, w) = train_trial_networks(tasks, protocol, trial)?;
    warnings.extend(w);
    distance_matrix(tasks, &nets, protocol.fim_data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> FisherDiagonal {
        normalize_unit_trace(&FisherDiagonal::new(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(unit(&[2.0, 2.0]).entries(), &[0.5, 0.5]);
        assert!(matches!(
            normalize_unit_trace(&FisherDiagonal::new(vec![0.0, 0.0]).unwrap()),
            Err(Error::ZeroTrace)
        ));
        let u = unit(&[0.25, 0.75]);
        assert_eq!(normalize_unit_trace(&u).unwrap(), u);
    }

    #[test]
    fn distance_hand_values() {
        assert_eq!(
            frechet_distance_diag(&unit(&[0.3, 0.7]), &unit(&[0.3, 0.7])).unwrap(),
            0.0
        );
        assert!((frechet_distance_diag(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        let d = frechet_distance_diag(&unit(&[0.5, 0.5]), &unit(&[1.0, 0.0])).unwrap();
        // (1/√2)·√((√0.5 − 1)² + 0.5)
        let hand = (((0.5f64).sqrt() - 1.0).powi(2) + 0.5).sqrt() / 2f64.sqrt();
        assert!((d - hand).abs() < 1e-15);
        assert!((d - 0.541196).abs() < 1e-6);
    }

    #[test]
    fn distance_rejects_bad_inputs() {
        let raw = FisherDiagonal::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            frechet_distance_diag(&raw, &unit(&[1.0, 1.0])),
            Err(Error::NotNormalized)
        ));
        assert!(frechet_distance_diag(&unit(&[1.0]), &unit(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn single_sample_fisher_is_squared_gradient() {
        let f = fim_diag_from_gradients(vec![vec![3.0, -2.0, 0.0]]).unwrap();
        assert_eq!(f.entries(), &[9.0, 4.0, 0.0]);
        let z = fim_diag_from_gradients(vec![vec![0.0; 4]; 3]).unwrap();
        assert!(z.entries().iter().all(|v| *v == 0.0));
        assert!(fim_diag_from_gradients(Vec::<Vec<f64>>::new()).is_err());
        match fim_diag_from_gradients(vec![vec![1.0], vec![f64::NAN]]) {
            Err(Error::NonFinite(m)) => assert!(m.contains("sample 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disjoint_gradient_support_gives_one() {
        let a = fim_diag_from_gradients(vec![vec![1.0, 2.0, 0.0, 0.0], vec![0.5, 0.1, 0.0, 0.0]]).unwrap();
        let b = fim_diag_from_gradients(vec![vec![0.0, 0.0, 3.0, 1.0]]).unwrap();
        assert!((distance_between(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_form_matches_diag_form() {
        let a = unit(&[0.5, 0.5]);
        let b = unit(&[1.0, 0.0]);
        let fa = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(a.entries().to_vec()));
        let fb = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(b.entries().to_vec()));
        let full = frechet_distance_full(&fa, &fb).unwrap();
        assert!((full - frechet_distance_diag(&a, &b).unwrap()).abs() < 1e-8);
        assert!(frechet_distance_full(&fa, &fa).unwrap() < 1e-8);
    }

    #[test]
    fn full_form_rejects_indefinite_matrix() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let ok = DMatrix::identity(2, 2) * 0.5;
        assert!(matches!(frechet_distance_full(&bad, &ok), Err(Error::NotPsd(_))));
    }

    #[test]
    fn closest_skips_diagonal_and_breaks_ties_low() {
        let m = vec![vec![0.0, 0.2, 0.5], vec![0.2, 0.0, 0.5], vec![0.9, 0.1, 0.0]];
        assert_eq!(closest_in(&m, 0), Some(1));
        assert_eq!(closest_in(&m, 1), Some(2));
        assert_eq!(closest_in(&m, 2), Some(0));
    }
}
