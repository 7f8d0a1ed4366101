//! Experiment configuration, orchestration and artifact writing.
//!
//! Configs are flat `key = value` files; `#` starts a comment. Keys that do
//! not apply to the chosen experiment are rejected with their line number.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fisher::{self, DistanceProtocol, FimData};
use crate::fuse::{self, FuseConfig, NasConfig, RandomSearchConfig, SearchReport};
use crate::idx;
use crate::networks::{self, NetworkSpec, Optimizer, TrainConfig};
use crate::search_space::{BaselineDictionary, BaselineEntry, CellSampler, Skeleton};
use crate::tasks::{generate_synthetic_family, standard_family, SyntheticFamilySpec, Task};
use crate::theory::{self, LrSchedule, NoiseKind, NoiseModel, QuadraticTask, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    TrainBaseline,
    DistanceMatrix,
    Nas,
    RandomSearch,
    ValidateTheory,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::TrainBaseline,
        ExperimentKind::DistanceMatrix,
        ExperimentKind::Nas,
        ExperimentKind::RandomSearch,
        ExperimentKind::ValidateTheory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TrainBaseline => "train-baseline",
            ExperimentKind::DistanceMatrix => "distance-matrix",
            ExperimentKind::Nas => "nas",
            ExperimentKind::RandomSearch => "random-search",
            ExperimentKind::ValidateTheory => "validate-theory",
        }
    }

    fn key_groups(self) -> &'static [&'static [&'static str]] {
        match self {
            ExperimentKind::TrainBaseline => &[
                DATA_KEYS,
                TRAIN_KEYS,
                SEARCH_KEYS,
                &["networks", "epsilon", "baseline_budget"],
            ],
            ExperimentKind::DistanceMatrix => &[DATA_KEYS, TRAIN_KEYS, &["networks", "trials", "epsilon", "fim_data"]],
            ExperimentKind::Nas | ExperimentKind::RandomSearch => {
                &[DATA_KEYS, TRAIN_KEYS, SEARCH_KEYS, FUSE_KEYS, NAS_KEYS]
            }
            ExperimentKind::ValidateTheory => &[THEORY_KEYS],
        }
    }

    fn accepts(self, key: &str) -> bool {
        COMMON_KEYS.contains(&key) || self.key_groups().iter().any(|g| g.contains(&key))
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config {
                line: 0,
                message: format!("unknown experiment {s:?}"),
            })
    }
}

const COMMON_KEYS: &[&str] = &["experiment", "seed", "out_dir"];
const DATA_KEYS: &[&str] = &[
    "data",
    "samples_per_class",
    "noise",
    "data_seed",
    "mnist_dir",
    "balanced_per_class",
];
const TRAIN_KEYS: &[&str] = &["optimizer", "lr", "momentum", "epochs", "batch_size"];
const SEARCH_KEYS: &[&str] = &["skeleton", "cell_nodes"];
const FUSE_KEYS: &[&str] = &[
    "candidates",
    "inner_steps",
    "alpha_tol",
    "max_iters",
    "alpha_lr",
    "fuse_lr",
    "rounds",
    "val_fraction",
];
const NAS_KEYS: &[&str] = &[
    "networks",
    "trials",
    "epsilon",
    "fim_data",
    "target",
    "baselines",
    "dictionary",
    "baseline_budget",
    "budget",
    "full_space",
    "compare_to",
];
const THEORY_KEYS: &[&str] = &[
    "theorem",
    "mu_a",
    "sigma_a",
    "mu_b",
    "sigma_b",
    "theta0",
    "steps",
    "noise_scale",
    "noise_kind",
    "lr_a",
    "lr_gamma",
    "seed_b",
];

fn cfg_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

/// Raw `key = value` entries with their line numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(i + 1, format!("expected `key = value`, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(cfg_err(i + 1, "empty key"));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(cfg_err(i + 1, format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| cfg_err(*line, format!("bad value for `{key}`: {v:?}"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.0)
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| cfg_err(*line, format!("bad entry {p:?} in `{key}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Ten Gaussian blobs on 1x6x6 inputs.
    Synthetic {
        samples_per_class: usize,
        noise: f64,
        seed: u64,
    },
    /// Directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheorySettings {
    /// 1: same task, two seeds. 2: two tasks.
    pub theorem: u8,
    pub task_a: QuadraticTask,
    pub task_b: QuadraticTask,
    pub sgd: SgdConfig,
    pub seed_b: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub balanced_per_class: Option<usize>,
    /// ε-network spec names, e.g. `mlp-1x32`.
    pub networks: Vec<String>,
    pub train: TrainConfig,
    pub trials: usize,
    pub epsilon: f64,
    pub fim_data: FimData,
    pub target: Option<String>,
    pub baselines: Option<Vec<String>>,
    pub dictionary: Option<PathBuf>,
    pub skeleton: Skeleton,
    pub cell_nodes: usize,
    pub baseline_budget: usize,
    pub fuse: FuseConfig,
    pub full_space: bool,
    pub budget: Option<usize>,
    pub compare_to: Option<PathBuf>,
    pub theory: Option<TheorySettings>,
    /// The config as written, for the run report.
    pub echo: Vec<(String, String)>,
}

pub const SYNTHETIC_SHAPE: [usize; 3] = [1, 6, 6];

pub fn parse_config(path: &Path, kind: ExperimentKind) -> Result<ExperimentConfig> {
    load_config(path, kind, None, None)
}

/// Reads a config file, with command-line `seed` / `out_dir` overrides
/// taking precedence over the file.
pub fn load_config(
    path: &Path,
    kind: ExperimentKind,
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| cfg_err(0, format!("cannot read {}: {e}", path.display())))?;
    let mut raw = RawConfig::parse(&text)?;
    if let Some(seed) = seed {
        raw.entries.insert("seed".into(), (0, seed.to_string()));
    }
    if let Some(dir) = out_dir {
        raw.entries.insert("out_dir".into(), (0, dir.display().to_string()));
    }
    from_raw(&raw, kind)
}

/// Parses and validates a config for `kind`.
pub fn parse_config_str(text: &str, kind: ExperimentKind) -> Result<ExperimentConfig> {
    from_raw(&RawConfig::parse(text)?, kind)
}

fn from_raw(raw: &RawConfig, kind: ExperimentKind) -> Result<ExperimentConfig> {
    for (key, (line, _)) in &raw.entries {
        if !kind.accepts(key) {
            let known = ExperimentKind::ALL.iter().any(|k| k.accepts(key));
            let msg = if known {
                format!("key `{key}` does not apply to {kind}")
            } else {
                format!("unknown key `{key}`")
            };
            return Err(cfg_err(*line, msg));
        }
    }
    if let Some(declared) = raw.get::<String>("experiment")? {
        if declared != kind.name() {
            return Err(cfg_err(
                raw.line("experiment"),
                format!("config is for {declared}, not {kind}"),
            ));
        }
    }
    let seed = raw.or("seed", 0u64)?;

    let data = match raw.or("data", "synthetic".to_string())?.as_str() {
        "synthetic" => DataSource::Synthetic {
            samples_per_class: raw.or("samples_per_class", 60usize)?,
            noise: raw.or("noise", 1.0f64)?,
            seed: raw.or("data_seed", seed)?,
        },
        "mnist" => DataSource::Mnist {
            dir: raw
                .get::<PathBuf>("mnist_dir")?
                .ok_or_else(|| cfg_err(raw.line("data"), "data = mnist needs `mnist_dir`"))?,
        },
        other => return Err(cfg_err(raw.line("data"), format!("unknown data source {other:?}"))),
    };

    let lr = raw.or("lr", 1e-3f64)?;
    let optimizer = match raw.or("optimizer", "adam".to_string())?.as_str() {
        "adam" => Optimizer::adam(lr),
        "sgd" => Optimizer::Sgd {
            lr,
            momentum: raw.or("momentum", 0.0f64)?,
            lr_decay: 0.0,
        },
        other => return Err(cfg_err(raw.line("optimizer"), format!("unknown optimizer {other:?}"))),
    };
    let train = TrainConfig {
        optimizer,
        epochs: raw.or("epochs", 30usize)?,
        batch_size: raw.or("batch_size", 32usize)?,
        seed,
        batch_order_seed: seed.wrapping_add(1),
    };
    train.validate().map_err(|e| cfg_err(raw.line("lr"), e.to_string()))?;

    let trials = raw.or("trials", 1usize)?;
    if trials == 0 {
        return Err(cfg_err(raw.line("trials"), "trials must be at least 1"));
    }
    let epsilon = raw.or("epsilon", 0.15f64)?;
    networks::meets_epsilon(1.0, epsilon).map_err(|e| cfg_err(raw.line("epsilon"), e.to_string()))?;
    let fim_data = match raw.or("fim_data", "test".to_string())?.as_str() {
        "test" => FimData::Test,
        "train" => FimData::Train,
        other => {
            return Err(cfg_err(
                raw.line("fim_data"),
                format!("fim_data must be test or train, got {other:?}"),
            ))
        }
    };
    let skeleton = match raw.get::<String>("skeleton")? {
        Some(s) => Skeleton::parse(&s).map_err(|e| cfg_err(raw.line("skeleton"), e))?,
        None => Skeleton::default(),
    };
    let cell_nodes = raw.or("cell_nodes", 3usize)?;
    CellSampler::full(cell_nodes).map_err(|e| cfg_err(raw.line("cell_nodes"), e.to_string()))?;

    let fuse_cfg = FuseConfig {
        num_candidates: raw.or("candidates", 2usize)?,
        inner_steps: raw.or("inner_steps", 10usize)?,
        alpha_tol: raw.or("alpha_tol", 1e-3f64)?,
        max_iters: raw.or("max_iters", 200usize)?,
        weight_optimizer: Optimizer::adam(raw.or("fuse_lr", 1e-2f64)?),
        alpha_lr: raw.or("alpha_lr", 0.5f64)?,
        outer_budget: raw.or("rounds", 3usize)?,
        val_fraction: raw.or("val_fraction", 0.2f64)?,
        batch_size: train.batch_size,
        seed: seed.wrapping_add(2),
    };
    if matches!(kind, ExperimentKind::Nas | ExperimentKind::RandomSearch) {
        if fuse_cfg.outer_budget == 0 {
            return Err(cfg_err(raw.line("rounds"), "rounds must be at least 1"));
        }
        fuse_cfg.validate().map_err(|e| cfg_err(0, e.to_string()))?;
    }
    let target = raw.get::<String>("target")?;
    if matches!(kind, ExperimentKind::Nas | ExperimentKind::RandomSearch) && target.is_none() {
        return Err(cfg_err(0, format!("{kind} needs `target`")));
    }
    let budget = raw.get::<usize>("budget")?;
    if budget == Some(0) {
        return Err(cfg_err(raw.line("budget"), "budget must be at least 1"));
    }

    let theory = if kind == ExperimentKind::ValidateTheory {
        Some(parse_theory(raw, seed)?)
    } else {
        None
    };

    Ok(ExperimentConfig {
        kind,
        seed,
        out_dir: raw.or("out_dir", PathBuf::from("out"))?,
        data,
        balanced_per_class: raw.get("balanced_per_class")?,
        networks: raw.list("networks")?.unwrap_or_else(|| vec!["mlp-1x32".to_string()]),
        train,
        trials,
        epsilon,
        fim_data,
        target,
        baselines: raw.list("baselines")?,
        dictionary: raw.get("dictionary")?,
        skeleton,
        cell_nodes,
        baseline_budget: raw.or("baseline_budget", 3usize)?,
        fuse: fuse_cfg,
        full_space: raw.or("full_space", false)?,
        budget,
        compare_to: raw.get("compare_to")?,
        theory,
        echo: raw.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    })
}

fn parse_theory(raw: &RawConfig, seed: u64) -> Result<TheorySettings> {
    let theorem = raw.or("theorem", 1u8)?;
    if theorem != 1 && theorem != 2 {
        return Err(cfg_err(raw.line("theorem"), "theorem must be 1 or 2"));
    }
    let mu_a = raw.list("mu_a")?.unwrap_or_else(|| vec![1.0, -2.0]);
    let sigma_a = raw.list("sigma_a")?.unwrap_or_else(|| vec![1.0, 4.0]);
    let task_a = QuadraticTask::new(mu_a, sigma_a).map_err(|e| cfg_err(raw.line("sigma_a"), e.to_string()))?;
    let mu_b = raw.list("mu_b")?.unwrap_or_else(|| task_a.mu.clone());
    let sigma_b = raw.list("sigma_b")?.unwrap_or_else(|| task_a.sigma.clone());
    let task_b = QuadraticTask::new(mu_b, sigma_b).map_err(|e| cfg_err(raw.line("sigma_b"), e.to_string()))?;
    if task_a.dim() != task_b.dim() {
        return Err(cfg_err(raw.line("mu_b"), "tasks must share a dimension"));
    }
    let noise_kind = match raw.or("noise_kind", "bounded".to_string())?.as_str() {
        "bounded" => NoiseKind::BoundedUniform,
        "gaussian" => NoiseKind::GaussianClamped,
        other => {
            return Err(cfg_err(
                raw.line("noise_kind"),
                format!("noise_kind must be bounded or gaussian, got {other:?}"),
            ))
        }
    };
    let noise_scale = raw.or("noise_scale", 1.0f64)?;
    if !(noise_scale >= 0.0) {
        return Err(cfg_err(raw.line("noise_scale"), "noise_scale must be >= 0"));
    }
    let steps = raw.or("steps", 100_000usize)?;
    if steps == 0 {
        return Err(cfg_err(raw.line("steps"), "steps must be at least 1"));
    }
    let gamma = raw.or("lr_gamma", 0.6f64)?;
    if !(gamma > 0.5 && gamma < 1.0) {
        return Err(cfg_err(raw.line("lr_gamma"), "lr_gamma must be in (0.5, 1)"));
    }
    let theta0 = raw.list("theta0")?.unwrap_or_else(|| vec![0.0; task_a.dim()]);
    if theta0.len() != task_a.dim() {
        return Err(cfg_err(raw.line("theta0"), "theta0 has the wrong dimension"));
    }
    Ok(TheorySettings {
        theorem,
        task_a,
        task_b,
        sgd: SgdConfig {
            steps,
            schedule: LrSchedule::Power {
                a: raw.or("lr_a", 0.5f64)?,
                gamma,
            },
            noise: NoiseModel {
                kind: noise_kind,
                scale: noise_scale,
            },
            theta0,
            seed,
            keep_trajectory: false,
        },
        seed_b: raw.or("seed_b", seed.wrapping_add(1))?,
    })
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub config: Vec<(String, String)>,
    pub seconds: f64,
    pub artifacts: Vec<PathBuf>,
    pub metrics: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let config: serde_json::Map<String, serde_json::Value> = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        let metrics: serde_json::Map<String, serde_json::Value> = self
            .metrics
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        let value = serde_json::json!({
            "experiment": self.kind.name(),
            "config": config,
            "seconds": self.seconds,
            "artifacts": self.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "metrics": metrics,
            "warnings": self.warnings,
        });
        serde_json::to_string_pretty(&value).expect("report serializes")
    }
}

/// Machine-readable error record for stderr.
pub fn error_record(err: &Error, exit_code: i32) -> String {
    serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": exit_code,
    })
    .to_string()
}

/// Exit status for a failed run: 1 for configuration problems, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

/// Builds the task family for the configured data source.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    let base = match &cfg.data {
        DataSource::Synthetic {
            samples_per_class,
            noise,
            seed,
        } => {
            let spec = SyntheticFamilySpec::with_random_centers(
                SYNTHETIC_SHAPE.to_vec(),
                10,
                1.0,
                *noise,
                *samples_per_class,
                *seed,
            );
            generate_synthetic_family(&spec)?
        }
        DataSource::Mnist { dir } => idx::load_mnist_split(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?,
    };
    let tasks = standard_family(&base)?;
    match cfg.balanced_per_class {
        Some(n) => tasks
            .iter()
            .enumerate()
            .map(|(i, t)| t.balanced(n, cfg.seed.wrapping_add(i as u64)))
            .collect(),
        None => Ok(tasks),
    }
}

fn head_width(tasks: &[Task]) -> usize {
    tasks.iter().map(|t| t.num_classes).max().unwrap_or(2)
}

fn network_specs(cfg: &ExperimentConfig, tasks: &[Task]) -> Result<Vec<NetworkSpec>> {
    let shape = tasks[0].input_shape();
    cfg.networks
        .iter()
        .map(|n| NetworkSpec::from_name(n, shape, head_width(tasks)))
        .collect()
}

fn protocol(cfg: &ExperimentConfig, spec: NetworkSpec) -> DistanceProtocol {
    DistanceProtocol {
        spec,
        train: cfg.train.clone(),
        trials: cfg.trials,
        seed: cfg.seed,
        fim_data: cfg.fim_data,
        epsilon: cfg.epsilon,
    }
}

struct Output {
    dir: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.artifacts.push(path.clone());
        Ok(path)
    }
}

/// Runs the configured experiment and writes its artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let start = Instant::now();
    let mut out = Output::new(&cfg.out_dir)?;
    let mut metrics = Vec::new();
    let mut warnings = Vec::new();
    match cfg.kind {
        ExperimentKind::TrainBaseline => train_baseline(cfg, &mut out, &mut metrics)?,
        ExperimentKind::DistanceMatrix => distance_matrix(cfg, &mut out, &mut metrics, &mut warnings)?,
        ExperimentKind::Nas | ExperimentKind::RandomSearch => search(cfg, &mut out, &mut metrics)?,
        ExperimentKind::ValidateTheory => validate_theory(cfg, &mut out, &mut metrics)?,
    }
    let mut report = RunReport {
        kind: cfg.kind,
        config: cfg.echo.clone(),
        seconds: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        artifacts: out.artifacts.clone(),
        metrics,
        warnings,
    };
    let json_path = out.dir.join("run_report.json");
    report.artifacts.push(json_path.clone());
    fs::write(&json_path, report.to_json())?;
    Ok(report)
}

/// Finds the best cell per task by random search over the full space.
pub fn discover_baselines(tasks: &[Task], cfg: &ExperimentConfig) -> Result<(BaselineDictionary, Vec<SearchReport>)> {
    let sampler = CellSampler::full(cfg.cell_nodes)?;
    let mut dict = BaselineDictionary::default();
    let mut reports = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let rs = RandomSearchConfig {
            train: cfg.train.clone(),
            val_fraction: cfg.fuse.val_fraction,
            seed: cfg.seed.wrapping_add(100 + i as u64),
        };
        let r = fuse::random_search(&sampler, &cfg.skeleton, task, cfg.baseline_budget, &rs)?;
        dict.insert(
            &task.name,
            BaselineEntry {
                ops: r.best_cell.operations(),
                cell: r.best_cell.clone(),
                skeleton: cfg.skeleton.clone(),
            },
        );
        reports.push(r);
    }
    Ok((dict, reports))
}

fn train_baseline(cfg: &ExperimentConfig, out: &mut Output, metrics: &mut Vec<(String, f64)>) -> Result<()> {
    let tasks = load_tasks(cfg)?;
    let specs = network_specs(cfg, &tasks)?;
    let mut log = String::from("task,network,epoch,loss,accuracy\n");
    let mut summary = String::from("task,network,test_accuracy,epsilon_met\n");
    for spec in &specs {
        for (i, task) in tasks.iter().enumerate() {
            let (seed, batch_order_seed) = fisher::trial_seeds(cfg.seed, 0, i);
            let tc = TrainConfig {
                seed,
                batch_order_seed,
                ..cfg.train.clone()
            };
            let net = networks::train(spec, task, &tc)?;
            for (e, l) in net.log.iter().enumerate() {
                log.push_str(&format!("{},{spec},{e},{:.6},{:.6}\n", task.name, l.loss, l.accuracy));
            }
            let perf = networks::performance(&net, task)?;
            let ok = networks::meets_epsilon(perf, cfg.epsilon)?;
            summary.push_str(&format!("{},{spec},{perf:.6},{}\n", task.name, u8::from(ok)));
            metrics.push((format!("{}:{spec}:test_accuracy", task.name), perf));
            let name = format!(
                "checkpoints/{}_{}.ckpt",
                task.name,
                spec.to_string().replace(['/', ' '], "_")
            );
            out.write(&name, networks::encode_checkpoint(&net))?;
        }
    }
    out.write("baseline_log.csv", log)?;
    out.write("baseline_summary.csv", summary)?;
    let (dict, reports) = discover_baselines(&tasks, cfg)?;
    let mut cells = String::from("task,best_cell,val_accuracy\n");
    for (task, r) in tasks.iter().zip(&reports) {
        cells.push_str(&format!(
            "{},{},{:.6}\n",
            task.name,
            r.best_cell.compact(),
            r.val_accuracy
        ));
    }
    out.write("baseline_cells.csv", cells)?;
    out.write("baselines.dict", dict.serialize())?;
    Ok(())
}

fn distance_matrix(
    cfg: &ExperimentConfig,
    out: &mut Output,
    metrics: &mut Vec<(String, f64)>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let tasks = load_tasks(cfg)?;
    let specs = network_specs(cfg, &tasks)?;
    for (n, spec) in specs.iter().enumerate() {
        let table = fisher::distance_table(&tasks, &protocol(cfg, spec.clone()))?;
        let suffix = if n == 0 {
            String::new()
        } else {
            format!("_{}", cfg.networks[n])
        };
        out.write(&format!("distance_mean{suffix}.csv"), table.mean_csv())?;
        out.write(&format!("distance_std{suffix}.csv"), table.std_csv())?;
        for (j, name) in table.names.iter().enumerate() {
            if let Some(i) = table.closest_source(j) {
                metrics.push((
                    format!("{}:closest_to_{name}={}", cfg.networks[n], table.names[i]),
                    table.mean[i][j],
                ));
            }
        }
        metrics.push((format!("{}:failed_trials", cfg.networks[n]), table.failed_trials as f64));
        warnings.extend(table.warnings.iter().cloned());
    }
    Ok(())
}

fn split_target(cfg: &ExperimentConfig, tasks: Vec<Task>) -> Result<(Vec<Task>, Task)> {
    let target_name = cfg.target.as_deref().expect("validated at parse time");
    let target = tasks
        .iter()
        .find(|t| t.name == target_name)
        .cloned()
        .ok_or_else(|| Error::UnknownTask(target_name.to_string()))?;
    let baselines: Vec<Task> = match &cfg.baselines {
        Some(names) => names
            .iter()
            .map(|n| {
                tasks
                    .iter()
                    .find(|t| &t.name == n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownTask(n.clone()))
            })
            .collect::<Result<_>>()?,
        None => tasks.into_iter().filter(|t| t.name != target_name).collect(),
    };
    if baselines.is_empty() {
        return Err(Error::invalid("baseline set is empty"));
    }
    Ok((baselines, target))
}

fn search(cfg: &ExperimentConfig, out: &mut Output, metrics: &mut Vec<(String, f64)>) -> Result<()> {
    let start = Instant::now();
    let tasks = load_tasks(cfg)?;
    let specs = network_specs(cfg, &tasks)?;
    let (baselines, target) = split_target(cfg, tasks)?;
    let dict = match &cfg.dictionary {
        Some(p) => BaselineDictionary::parse(&fs::read_to_string(p)?)?,
        None => discover_baselines(&baselines, cfg)?.0,
    };
    let nas_cfg = NasConfig {
        fuse: cfg.fuse.clone(),
        distance: protocol(cfg, specs[0].clone()),
        final_train: cfg.train.clone(),
        full_space: cfg.full_space,
    };
    let space = fuse::reduced_space(&baselines, &target, &dict, &nas_cfg.distance, cfg.full_space)?;
    let budget = cfg.budget.unwrap_or(cfg.fuse.outer_budget * cfg.fuse.num_candidates);
    let report = if cfg.kind == ExperimentKind::Nas {
        if budget != cfg.fuse.outer_budget * cfg.fuse.num_candidates {
            return Err(cfg_err(0, "for nas, budget must equal rounds * candidates"));
        }
        fuse::nas_in_space(&space, &target, &nas_cfg, start)?
    } else {
        let rs = RandomSearchConfig {
            train: cfg.train.clone(),
            val_fraction: cfg.fuse.val_fraction,
            seed: cfg.seed.wrapping_add(3),
        };
        let mut r = fuse::random_search(&space.sampler, &space.skeleton, &target, budget, &rs)?;
        r.closest_task = Some(space.closest.clone());
        r.distances = space.distances.clone();
        r.seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        r
    };
    out.write("search_report.txt", report.to_text())?;
    out.write("search_candidates.csv", report.candidates_csv())?;
    metrics.push(("val_accuracy".into(), report.val_accuracy));
    metrics.push(("test_accuracy".into(), report.test_accuracy));
    metrics.push(("parameter_count".into(), report.parameter_count as f64));
    if let Some(d) = report.closest_distance() {
        metrics.push(("closest_distance".into(), d));
    }
    if let Some(path) = &cfg.compare_to {
        let other = SearchReport::parse(&fs::read_to_string(path)?)?;
        let cmp = fuse::compare_reports(&other, &report)?;
        out.write("comparison.txt", cmp.to_text())?;
    }
    Ok(())
}

fn validate_theory(cfg: &ExperimentConfig, out: &mut Output, metrics: &mut Vec<(String, f64)>) -> Result<()> {
    let th = cfg.theory.as_ref().expect("parsed for validate-theory");
    let trace = match th.theorem {
        1 => theory::theorem1_trace(&th.task_a, &th.sgd, (th.sgd.seed, th.seed_b))?,
        _ => theory::theorem2_trace(&th.task_a, &th.task_b, &th.sgd, th.sgd.seed)?,
    };
    out.write("trace.csv", trace.to_csv())?;
    out.write(
        "theory_report.txt",
        format!("theorem={} steps={} {}\n", th.theorem, th.sgd.steps, trace.summary()),
    )?;
    metrics.push(("final_distance".into(), trace.final_distance()));
    if let Some(l) = trace.limit {
        metrics.push(("analytic_limit".into(), l));
    }
    Ok(())
}
