//! SGD with Polyak–Ruppert averaging on quadratic Gaussian tasks, where the
//! Fisher information is available in closed form.
//!
//! A task has data `x ~ N(mu, diag(sigma))` and per-sample loss
//! `0.5 * ||theta - x||^2`, so the per-sample gradient is `theta - x` and the
//! Fisher diagonal at `theta` is `(theta - mu)^2 + sigma`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fisher::{self, FimData, FisherDiagonal};
use crate::networks::{self, NetworkSpec, TrainConfig};
use crate::tasks::Task;

/// Iterates whose norm exceeds this are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    pub mu: Vec<f64>,
    /// Diagonal of the data covariance; entries must be positive.
    pub sigma: Vec<f64>,
}

impl QuadraticTask {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma.len() {
            return Err(Error::shape(format!(
                "mean has {} entries, covariance {}",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("covariance diagonal must be positive"));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mean must be finite"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Per-sample gradients `theta - x_i` for `n` draws of `x`.
    pub fn sample_gradients(&self, theta: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                theta
                    .iter()
                    .zip(self.mu.iter().zip(&self.sigma))
                    .map(|(t, (m, s))| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        t - (m + s.sqrt() * z)
                    })
                    .collect()
            })
            .collect()
    }
}

/// `(theta_j - mu_j)^2 + sigma_j`.
pub fn analytic_fim_diag(task: &QuadraticTask, theta: &[f64]) -> Result<FisherDiagonal> {
    if theta.len() != task.dim() {
        return Err(Error::shape(format!(
            "theta has {} entries, task {}",
            theta.len(),
            task.dim()
        )));
    }
    FisherDiagonal::new(
        theta
            .iter()
            .zip(task.mu.iter().zip(&task.sigma))
            .map(|(t, (m, s))| (t - m) * (t - m) + s)
            .collect(),
    )
}

/// Empirical Fisher diagonal from `n` sampled per-sample gradients.
pub fn empirical_fim_diag(task: &QuadraticTask, theta: &[f64], n: usize, seed: u64) -> Result<FisherDiagonal> {
    if theta.len() != task.dim() {
        return Err(Error::shape(format!(
            "theta has {} entries, task {}",
            theta.len(),
            task.dim()
        )));
    }
    fisher::fim_diag_from_gradients(task.sample_gradients(theta, n, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Uniform on `[-sqrt(3 s), sqrt(3 s)]` per coordinate: second moment `s`.
    BoundedUniform,
    /// `N(0, s)` clipped symmetrically at three standard deviations.
    GaussianClamped,
}

/// Zero-mean additive gradient noise with per-coordinate second moment at
/// most `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub scale: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::BoundedUniform,
            scale: 0.0,
        }
    }

    pub fn bounded(scale: f64) -> Self {
        Self {
            kind: NoiseKind::BoundedUniform,
            scale,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!(
                "noise scale {} must be finite and >= 0",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, dim: usize) -> Vec<f64> {
        if self.scale == 0.0 {
            return vec![0.0; dim];
        }
        match self.kind {
            NoiseKind::BoundedUniform => {
                let a = (3.0 * self.scale).sqrt();
                (0..dim).map(|_| rng.random_range(-a..=a)).collect()
            }
            NoiseKind::GaussianClamped => {
                let sd = self.scale.sqrt();
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        (sd * z).clamp(-3.0 * sd, 3.0 * sd)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `a * t^(-gamma)` with `gamma` in (0.5, 1).
    Power {
        a: f64,
        gamma: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Power { a: 0.5, gamma: 0.6 }
    }
}

impl LrSchedule {
    fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant(lr) if lr > 0.0 && lr.is_finite() => Ok(()),
            LrSchedule::Power { a, gamma } if a > 0.0 && a.is_finite() && gamma > 0.5 && gamma < 1.0 => Ok(()),
            other => Err(Error::invalid(format!("invalid learning-rate schedule {other:?}"))),
        }
    }

    /// Step size for step `t >= 1`.
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Power { a, gamma } => a * (t as f64).powf(-gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub steps: usize,
    pub schedule: LrSchedule,
    pub noise: NoiseModel,
    pub theta0: Vec<f64>,
    pub seed: u64,
    /// Keep every iterate (memory grows with `steps`).
    pub keep_trajectory: bool,
}

/// Checkpoint of the running average.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: usize,
    pub average: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdRun {
    pub checkpoints: Vec<Checkpoint>,
    pub final_theta: Vec<f64>,
    pub final_average: Vec<f64>,
    /// `theta_1, ..., theta_T` when requested.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// Half-decade times `10, 32, 100, 316, ...` below `steps`, then `steps`.
pub fn checkpoint_times(steps: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = 2;
    loop {
        let t = 10f64.powf(k as f64 / 2.0).round() as usize;
        if t >= steps {
            break;
        }
        out.push(t);
        k += 1;
    }
    out.push(steps);
    out
}

/// `theta_t = theta_{t-1} - lr_t (theta_{t-1} - mu + eps_t)` for
/// `t = 1..=steps`, with running average `(1/t) sum_{s<=t} theta_s`.
pub fn sgd_run(task: &QuadraticTask, cfg: &SgdConfig) -> Result<SgdRun> {
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if cfg.theta0.len() != task.dim() {
        return Err(Error::shape(format!(
            "theta0 has {} entries, task {}",
            cfg.theta0.len(),
            task.dim()
        )));
    }
    cfg.schedule.validate()?;
    cfg.noise.validate()?;
    let times = checkpoint_times(cfg.steps);
    let mut next = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = cfg.theta0.clone();
    let mut avg = vec![0.0; task.dim()];
    let mut checkpoints = Vec::with_capacity(times.len());
    let mut trajectory = cfg.keep_trajectory.then(|| Vec::with_capacity(cfg.steps));
    for t in 1..=cfg.steps {
        let lr = cfg.schedule.at(t);
        let eps = cfg.noise.sample(&mut rng, task.dim());
        for ((th, m), e) in theta.iter_mut().zip(&task.mu).zip(&eps) {
            *th -= lr * (*th - m + e);
        }
        if theta.iter().map(|v| v * v).sum::<f64>().sqrt() > DIVERGENCE_NORM || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::SgdDiverged { step: t });
        }
        let w = 1.0 / t as f64;
        for (a, th) in avg.iter_mut().zip(&theta) {
            *a += (th - *a) * w;
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(theta.clone());
        }
        if times[next] == t {
            checkpoints.push(Checkpoint {
                t,
                average: avg.clone(),
            });
            next += 1;
        }
    }
    Ok(SgdRun {
        checkpoints,
        final_theta: theta,
        final_average: avg,
        trajectory,
    })
}

/// Distance trace `(t, d_t)`, plus the analytic limit when one is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub points: Vec<(usize, f64)>,
    pub limit: Option<f64>,
}

impl Trace {
    pub fn final_distance(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.1)
    }

    pub fn at(&self, t: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == t).map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,d_t\n");
        for (t, d) in &self.points {
            writeln!(s, "{t},{d:.12}").unwrap();
        }
        s
    }

    /// One-line summary: final distance and, where known, the limit.
    pub fn summary(&self) -> String {
        match self.limit {
            Some(l) => format!("final_d={:.6} analytic_limit={l:.6}", self.final_distance()),
            None => format!("final_d={:.6}", self.final_distance()),
        }
    }
}

fn normalized_distance(a: &FisherDiagonal, b: &FisherDiagonal) -> Result<f64> {
    fisher::distance_between(a, b)
}

fn paired_trace(
    task_a: &QuadraticTask,
    run_a: &SgdRun,
    task_b: &QuadraticTask,
    run_b: &SgdRun,
) -> Result<Vec<(usize, f64)>> {
    run_a
        .checkpoints
        .iter()
        .zip(&run_b.checkpoints)
        .map(|(ca, cb)| {
            let fa = analytic_fim_diag(task_a, &ca.average)?;
            let fb = analytic_fim_diag(task_b, &cb.average)?;
            Ok((ca.t, normalized_distance(&fa, &fb)?))
        })
        .collect()
}

/// Same task, two seeds: the distance between the Fishers at the two
/// averaged iterates, at every checkpoint.
pub fn theorem1_trace(task: &QuadraticTask, cfg: &SgdConfig, seeds: (u64, u64)) -> Result<Trace> {
    let a = sgd_run(
        task,
        &SgdConfig {
            seed: seeds.0,
            ..cfg.clone()
        },
    )?;
    let b = sgd_run(
        task,
        &SgdConfig {
            seed: seeds.1,
            ..cfg.clone()
        },
    )?;
    Ok(Trace {
        points: paired_trace(task, &a, task, &b)?,
        limit: None,
    })
}

/// `(1/sqrt 2) || sqrt(sigma_a / tr) - sqrt(sigma_b / tr) ||`, the distance
/// between the Fishers at the two optima.
pub fn theorem2_limit(task_a: &QuadraticTask, task_b: &QuadraticTask) -> Result<f64> {
    if task_a.dim() != task_b.dim() {
        return Err(Error::shape(format!(
            "task dimensions {} vs {}",
            task_a.dim(),
            task_b.dim()
        )));
    }
    normalized_distance(
        &FisherDiagonal::new(task_a.sigma.clone())?,
        &FisherDiagonal::new(task_b.sigma.clone())?,
    )
}

/// One run per task (seeds `seed` and `seed + 1`); returns the trace and
/// its analytic limit.
pub fn theorem2_trace(task_a: &QuadraticTask, task_b: &QuadraticTask, cfg: &SgdConfig, seed: u64) -> Result<Trace> {
    let limit = theorem2_limit(task_a, task_b)?;
    let a = sgd_run(task_a, &SgdConfig { seed, ..cfg.clone() })?;
    let b = sgd_run(
        task_b,
        &SgdConfig {
            seed: seed.wrapping_add(1),
            ..cfg.clone()
        },
    )?;
    Ok(Trace {
        points: paired_trace(task_a, &a, task_b, &b)?,
        limit: Some(limit),
    })
}

/// Trains `spec` on `task` twice with `cfg_a` and `cfg_b` and returns the
/// task distance between the two networks.
pub fn paired_training_distance(
    spec: &NetworkSpec,
    task: &Task,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
) -> Result<f64> {
    let a = networks::train(spec, task, cfg_a)?;
    let b = networks::train(spec, task, cfg_b)?;
    if cfg_a == cfg_b && a.params != b.params {
        return Err(Error::Nondeterminism(
            "identical training configurations produced different weights".into(),
        ));
    }
    fisher::task_distance((task, &a), (task, &b), FimData::Test)
}

/// Two structurally similar networks trained with identical seeds and
/// batch order; their distance must be exactly zero.
pub fn proposition1_check(spec: &NetworkSpec, task: &Task, cfg: &TrainConfig) -> Result<f64> {
    let d = paired_training_distance(spec, task, cfg, cfg)?;
    if d != 0.0 {
        return Err(Error::Nondeterminism(format!(
            "identical trainings are at distance {d}"
        )));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(steps: usize) -> SgdConfig {
        SgdConfig {
            steps,
            schedule: LrSchedule::default(),
            noise: NoiseModel::bounded(1.0),
            theta0: vec![0.0, 0.0],
            seed: 1,
            keep_trajectory: false,
        }
    }

    #[test]
    fn analytic_fim_examples() {
        let t = QuadraticTask::new(vec![0.5, -1.0], vec![1.0, 4.0]).unwrap();
        assert_eq!(analytic_fim_diag(&t, &[0.5, -1.0]).unwrap().entries(), &[1.0, 4.0]);
        let unit = QuadraticTask::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(analytic_fim_diag(&unit, &[1.0, 0.0]).unwrap().entries(), &[2.0, 1.0]);
        let scaled = QuadraticTask::new(vec![0.5, -1.0], vec![3.0, 12.0]).unwrap();
        assert_eq!(
            analytic_fim_diag(&scaled, &[0.5, -1.0]).unwrap().entries(),
            &[3.0, 12.0]
        );
        assert!(QuadraticTask::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn noiseless_constant_step_contracts_geometrically() {
        let t = QuadraticTask::new(vec![2.0, -1.0], vec![1.0, 1.0]).unwrap();
        let lr = 0.1;
        let c = SgdConfig {
            schedule: LrSchedule::Constant(lr),
            noise: NoiseModel::none(),
            ..cfg(50)
        };
        let run = sgd_run(&t, &c).unwrap();
        let factor = (1.0 - lr).powi(50);
        for (th, m) in run.final_theta.iter().zip(&t.mu) {
            assert!(((th - m) - (0.0 - m) * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_average_is_the_iterate() {
        let t = QuadraticTask::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let run = sgd_run(&t, &cfg(1)).unwrap();
        assert_eq!(run.final_average, run.final_theta);
        assert_eq!(run.checkpoints.len(), 1);
        assert!(sgd_run(&t, &cfg(0)).is_err());
    }

    #[test]
    fn checkpoints_are_half_decades() {
        assert_eq!(checkpoint_times(1000), vec![10, 32, 100, 316, 1000]);
        assert_eq!(checkpoint_times(5), vec![5]);
        let t = checkpoint_times(100_000);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert!(t.contains(&10_000));
    }

    #[test]
    fn divergence_reports_step() {
        let t = QuadraticTask::new(vec![1.0], vec![1.0]).unwrap();
        let c = SgdConfig {
            schedule: LrSchedule::Constant(3.0),
            noise: NoiseModel::none(),
            theta0: vec![0.0],
            ..cfg(1000)
        };
        assert!(matches!(sgd_run(&t, &c), Err(Error::SgdDiverged { .. })));
    }

    #[test]
    fn schedule_exponent_must_allow_averaging() {
        let t = QuadraticTask::new(vec![1.0], vec![1.0]).unwrap();
        let c = SgdConfig {
            schedule: LrSchedule::Power { a: 0.5, gamma: 0.4 },
            theta0: vec![0.0],
            ..cfg(10)
        };
        assert!(sgd_run(&t, &c).is_err());
    }

    #[test]
    fn theorem2_limit_hand_value() {
        let a = QuadraticTask::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = QuadraticTask::new(vec![0.0, 0.0], vec![2.0, 0.5]).unwrap();
        let hand = (((0.5f64).sqrt() - 0.8f64.sqrt()).powi(2) + ((0.5f64).sqrt() - 0.2f64.sqrt()).powi(2)).sqrt()
            / 2f64.sqrt();
        assert!((theorem2_limit(&a, &b).unwrap() - hand).abs() < 1e-15);
        assert_eq!(theorem2_limit(&a, &a).unwrap(), 0.0);
    }
}
