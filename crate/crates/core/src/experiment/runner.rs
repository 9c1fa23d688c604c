//! Role dispatch from a JSON run configuration, and the worker-scaling
//! benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::Deserialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    run_evaluator, run_worker, train_and_evaluate, Cluster, ClusterSpec, Experiment, FaultPlan,
};
use crate::error::{Error, Result};
use crate::canned::{self, CannedConfig};
use crate::estimator::{ClusterConfig, RunConfig, TaskSpec, TaskType};
use crate::feature_columns::numeric;
use crate::input::{InputBatch, InputFn};
use crate::optimizer::Optimizer;
use crate::tensor::Tensor;

/// Environment variable holding the JSON run configuration.
pub const RUN_CONFIG_ENV: &str = "ESTIMATOR_RUN_CONFIG";
pub const SCALING_CSV_HEADER: &str = "workers,steps_per_sec,speedup_vs_1";

/// A cluster member list: either a count or one entry per task.
#[derive(Deserialize)]
#[serde(untagged)]
enum Members {
    Count(usize),
    Hosts(Vec<String>),
}

impl Members {
    fn len(&self) -> usize {
        match self {
            Members::Count(n) => *n,
            Members::Hosts(h) => h.len(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvCluster {
    #[serde(default)]
    ps: Option<Members>,
    #[serde(default)]
    worker: Option<Members>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvConfig {
    cluster: Option<EnvCluster>,
    task: Option<TaskSpec>,
    model_dir: Option<PathBuf>,
    save_checkpoints_steps: Option<u64>,
    keep_checkpoint_max: Option<usize>,
    seed: Option<u64>,
}

/// Parses a run configuration, overriding `base` field by field.
pub fn parse_run_config(json: &str, base: Option<&RunConfig>) -> Result<RunConfig> {
    let env: EnvConfig =
        serde_json::from_str(json).map_err(|e| Error::Config(format!("{RUN_CONFIG_ENV}: {e}")))?;
    let mut cfg = match (base, env.model_dir) {
        (_, Some(dir)) => {
            let mut c = base.cloned().unwrap_or_else(|| RunConfig::new(""));
            c.model_dir = dir;
            c
        }
        (Some(b), None) => b.clone(),
        (None, None) => {
            return Err(Error::Config(format!(
                "{RUN_CONFIG_ENV}: model_dir is required"
            )))
        }
    };
    if let Some(c) = env.cluster {
        cfg.cluster = ClusterConfig {
            num_ps: c.ps.map_or(0, |m| m.len()),
            num_workers: c.worker.map_or(0, |m| m.len()),
        };
    }
    if let Some(t) = env.task {
        cfg.task = t;
    }
    if let Some(s) = env.save_checkpoints_steps {
        cfg.save_checkpoints_steps = s;
    }
    if let Some(k) = env.keep_checkpoint_max {
        cfg.keep_checkpoint_max = k;
    }
    if let Some(s) = env.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses `ESTIMATOR_RUN_CONFIG`.
pub fn run_config_from_env(base: Option<&RunConfig>) -> Result<RunConfig> {
    let json = std::env::var(RUN_CONFIG_ENV).map_err(|_| Error::RunConfigNotSet)?;
    parse_run_config(&json, base)
}

impl ClusterSpec {
    pub fn from_run_config(cfg: &RunConfig) -> ClusterSpec {
        ClusterSpec::new(cfg.cluster.num_ps, cfg.cluster.num_workers)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskOutcome {
    Local {
        global_step: u64,
        metrics: BTreeMap<String, f64>,
    },
    Worker {
        index: usize,
        batches: u64,
    },
    Ps {
        index: usize,
    },
    Evaluator {
        evaluated_steps: Vec<u64>,
    },
}

/// Runs the role named by `task` against a shared cluster. Every task runs
/// the same code; only the role differs.
pub fn run_task(
    cluster: &Cluster,
    exp: &Experiment,
    task: TaskSpec,
    faults: &FaultPlan,
) -> Result<TaskOutcome> {
    let spec = cluster.spec();
    match task.task_type {
        TaskType::Local => {
            let est = &exp.estimator;
            let global_step =
                est.train(&exp.train_input_fn, None, Some(exp.train_steps), Vec::new())?;
            let metrics = est.evaluate(&exp.eval_input_fn, exp.eval_steps, Vec::new(), None)?;
            Ok(TaskOutcome::Local {
                global_step,
                metrics,
            })
        }
        TaskType::Worker => {
            if task.index >= spec.num_workers {
                return Err(Error::Config(format!(
                    "worker index {} out of range",
                    task.index
                )));
            }
            let batches = run_worker(cluster, exp, task.index, faults)?;
            Ok(TaskOutcome::Worker {
                index: task.index,
                batches,
            })
        }
        TaskType::Ps => {
            cluster.shard(task.index)?;
            while !cluster.training_done() && !cluster.is_shutdown() {
                thread::sleep(Duration::from_millis(5));
            }
            Ok(TaskOutcome::Ps { index: task.index })
        }
        TaskType::Evaluator => {
            let stop = || cluster.training_done() || cluster.is_shutdown();
            let evaluated = run_evaluator(exp, &stop)?;
            Ok(TaskOutcome::Evaluator {
                evaluated_steps: evaluated.into_iter().map(|(s, _)| s).collect(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub workers: usize,
    pub steps_per_sec: f64,
    pub speedup_vs_1: f64,
}

pub const BENCH_INPUT_DIM: usize = 64;
pub const BENCH_HIDDEN: [usize; 2] = [256, 256];
pub const BENCH_BATCH: usize = 64;

/// The compute-bound model used for scaling runs: a wide two-layer DNN
/// regressor on random dense input, so each step is dominated by matmuls
/// rather than parameter-server traffic.
pub fn benchmark_experiment(model_dir: &Path, seed: u64) -> Result<Experiment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = BENCH_BATCH * 16;
    let x: Vec<f64> = (0..n * BENCH_INPUT_DIM)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let y: Vec<f64> = x
        .chunks(BENCH_INPUT_DIM)
        .map(|row| row.iter().step_by(3).sum::<f64>().sin())
        .collect();
    let data = InputBatch::new()
        .with_dense("x", Tensor::new(vec![n, BENCH_INPUT_DIM], x)?)
        .with_label("label", Tensor::new(vec![n, 1], y)?);
    let cfg = CannedConfig::dnn(BENCH_HIDDEN.to_vec(), vec![numeric("x", BENCH_INPUT_DIM)])
        .with_dnn_optimizer(Optimizer::sgd(0.01));
    let run = RunConfig::new(model_dir)
        .with_seed(seed)
        .with_save_checkpoints_steps(1_000_000);
    let est = canned::dnn_regressor(cfg, run)?;
    let train = InputFn::from_batch(data.clone(), BENCH_BATCH, None, None)?;
    let eval = InputFn::from_batch(data, BENCH_BATCH * 4, Some(1), None)?;
    Ok(Experiment::new(est, train, eval, u64::MAX))
}

/// Trains a fresh model for `budget` wall time at each worker count.
/// `make` builds the experiment for a given model directory.
pub fn benchmark_scaling(
    make: &dyn Fn(&Path) -> Result<Experiment>,
    worker_counts: &[usize],
    num_ps: usize,
    budget: Duration,
    scratch: &Path,
) -> Result<Vec<ScalingRow>> {
    let mut rates = Vec::new();
    for &n in worker_counts {
        let dir = scratch.join(format!("workers-{n}"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let mut exp = make(&dir)?;
        exp.train_steps = u64::MAX;
        exp.time_limit = Some(budget);
        let r = train_and_evaluate(&exp, ClusterSpec::new(num_ps, n), &FaultPlan::none())?;
        rates.push((n, r.global_step as f64 / r.elapsed.as_secs_f64()));
    }
    let base = rates
        .iter()
        .find(|(n, _)| *n == 1)
        .or(rates.first())
        .map_or(1.0, |(_, r)| *r);
    Ok(rates
        .into_iter()
        .map(|(workers, steps_per_sec)| ScalingRow {
            workers,
            steps_per_sec,
            speedup_vs_1: steps_per_sec / base,
        })
        .collect())
}

pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{SCALING_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.3},{:.4}",
            r.workers, r.steps_per_sec, r.speedup_vs_1
        )?;
    }
    Ok(())
}
