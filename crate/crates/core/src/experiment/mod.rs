//! Between-graph replicated training on an in-process simulated cluster:
//! parameter-server shards, asynchronous workers, a leader that owns
//! checkpointing, and a continuous evaluator.

mod ps;
mod runner;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    checkpoint_step, latest_checkpoint, restore_checkpoint, step_from_file_name, CheckpointManager,
    Estimator, TaskSpec, TaskType, CHIEF_WRITER,
};
use crate::graph::{Collection, ExecutionContext};
use crate::input::InputFn;
use crate::model_fn::Mode;

pub use ps::{assign_variables, checksum, verify_checksum, Cluster, PsShard, CHECKSUM_VARIABLE};
pub use runner::{
    benchmark_experiment, benchmark_scaling, parse_run_config, run_config_from_env, run_task, write_scaling_csv,
    ScalingRow, TaskOutcome, RUN_CONFIG_ENV, SCALING_CSV_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_ps: usize,
    pub num_workers: usize,
    #[serde(default)]
    pub evaluator: bool,
}

impl ClusterSpec {
    pub fn new(num_ps: usize, num_workers: usize) -> Self {
        ClusterSpec {
            num_ps,
            num_workers,
            evaluator: false,
        }
    }

    pub fn with_evaluator(mut self) -> Self {
        self.evaluator = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ps == 0 || self.num_workers == 0 {
            return Err(Error::Config(format!(
                "cluster needs at least one ps and one worker (got ps={}, worker={})",
                self.num_ps, self.num_workers
            )));
        }
        Ok(())
    }
}

/// A simulated crash: when the global step reaches `at_step`, worker
/// `worker` drops all of its state. With `restart` it comes back after
/// `restart_after` with a fresh graph and a fresh input pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Kill {
    pub worker: usize,
    pub at_step: u64,
    pub restart: bool,
    pub restart_after: Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub kills: Vec<Kill>,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn kill_and_restart(mut self, worker: usize, at_step: u64) -> Self {
        self.kills.push(Kill {
            worker,
            at_step,
            restart: true,
            restart_after: Duration::from_millis(1),
        });
        self
    }

    pub fn kill(mut self, worker: usize, at_step: u64) -> Self {
        self.kills.push(Kill {
            worker,
            at_step,
            restart: false,
            restart_after: Duration::ZERO,
        });
        self
    }

    fn validate(&self, spec: &ClusterSpec) -> Result<()> {
        for k in &self.kills {
            if k.worker == 0 {
                return Err(Error::Config(
                    "the leader (worker 0) cannot be killed".into(),
                ));
            }
            if k.worker >= spec.num_workers {
                return Err(Error::Config(format!(
                    "kill targets worker {} but the cluster has {}",
                    k.worker, spec.num_workers
                )));
            }
        }
        Ok(())
    }

    fn for_worker(&self, index: usize) -> Vec<Kill> {
        let mut ks: Vec<Kill> = self
            .kills
            .iter()
            .copied()
            .filter(|k| k.worker == index)
            .collect();
        ks.sort_by_key(|k| std::cmp::Reverse(k.at_step));
        ks
    }
}

/// What to train, what to evaluate on, and for how long.
#[derive(Clone)]
pub struct Experiment {
    pub estimator: Estimator,
    pub train_input_fn: InputFn,
    pub eval_input_fn: InputFn,
    pub train_steps: u64,
    pub eval_steps: Option<u64>,
    pub eval_poll: Duration,
    pub time_limit: Option<Duration>,
}

impl Experiment {
    pub fn new(
        estimator: Estimator,
        train_input_fn: InputFn,
        eval_input_fn: InputFn,
        train_steps: u64,
    ) -> Self {
        Experiment {
            estimator,
            train_input_fn,
            eval_input_fn,
            train_steps,
            eval_steps: None,
            eval_poll: Duration::from_millis(100),
            time_limit: None,
        }
    }

    pub fn with_eval_steps(mut self, steps: u64) -> Self {
        self.eval_steps = Some(steps);
        self
    }

    pub fn with_eval_poll(mut self, poll: Duration) -> Self {
        self.eval_poll = poll;
        self
    }

    /// Stops handing out steps once `limit` has elapsed.
    pub fn with_time_limit(mut self, limit: Duration) -> Self {
        self.time_limit = Some(limit);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub global_step: u64,
    /// Metrics of the final checkpoint.
    pub metrics: BTreeMap<String, f64>,
    /// Batches each worker contributed; they sum to `global_step` minus the
    /// step the run resumed from.
    pub worker_batches: Vec<u64>,
    /// Checkpoint steps the evaluator processed, in order.
    pub evaluated_steps: Vec<u64>,
    pub elapsed: Duration,
}

/// Decrements the active-worker count however the worker exits.
struct ExitGuard<'a>(&'a Cluster);

impl Drop for ExitGuard<'_> {
    fn drop(&mut self) {
        self.0.worker_exited();
    }
}

struct Leader {
    manager: CheckpointManager,
    every: u64,
    last: Option<u64>,
}

impl Leader {
    fn maybe_save(&mut self, cluster: &Cluster) -> Result<()> {
        let step = cluster.global_step();
        let due = match self.last {
            None => true,
            Some(last) => step / self.every > last / self.every,
        };
        if due {
            self.save(cluster)?;
        }
        Ok(())
    }

    fn save(&mut self, cluster: &Cluster) -> Result<()> {
        let ckpt = cluster.checkpoint()?;
        if self.last != Some(ckpt.global_step) {
            self.manager.save(&ckpt)?;
            self.last = Some(ckpt.global_step);
        }
        Ok(())
    }
}

/// One worker task. Returns the number of batches it applied.
pub(crate) fn run_worker(
    cluster: &Cluster,
    exp: &Experiment,
    index: usize,
    faults: &FaultPlan,
) -> Result<u64> {
    let _guard = ExitGuard(cluster);
    let est = &exp.estimator;
    let num_workers = cluster.spec().num_workers;
    let mut leader = (index == 0).then(|| Leader {
        manager: CheckpointManager::new(
            est.model_dir(),
            est.config().keep_checkpoint_max,
            CHIEF_WRITER,
        ),
        every: est.config().save_checkpoints_steps,
        last: None,
    });
    let mut kills = faults.for_worker(index);
    let mut applied = 0u64;

    'lives: loop {
        let mut batches = exp.train_input_fn.shard(num_workers, index).call()?;
        let first = match batches.next() {
            Some(b) => b?,
            None if leader.is_some() => return Err(Error::EmptyInput),
            None => break,
        };
        let (mut g, spec) = est.build_graph(Mode::Train, &first.signature())?;
        if let Some(l) = leader.as_mut().filter(|l| l.last.is_none()) {
            if let Some(p) = latest_checkpoint(est.model_dir())? {
                let ckpt = restore_checkpoint(&p)?;
                ckpt.restore_into(&mut g)?;
                l.last = Some(ckpt.global_step);
            }
            cluster.initialize_from(&g)?;
            l.maybe_save(cluster)?;
        } else if !cluster.wait_initialized() {
            break;
        }

        let loss = spec.loss.expect("validated train spec");
        let updates: Vec<_> = g.updates_of(spec.train_op.expect("validated train spec"));
        let pulled: Vec<_> = g
            .variables()
            .into_iter()
            .filter(|&v| g.var_def(v).collection == Collection::Model)
            .map(|v| (v, g.var_def(v).name.clone()))
            .collect();
        let pushes: Vec<_> = updates
            .iter()
            .map(|(u, _)| {
                (
                    g.var_def(u.var).name.clone(),
                    u.slot.map(|s| g.var_def(s).name.clone()),
                    u.optimizer.clone(),
                )
            })
            .collect();
        let mut fetches = vec![loss];
        fetches.extend(updates.iter().map(|(u, _)| u.grad));
        let mut ctx = ExecutionContext::new(g);
        let mut pending = Some(first);

        loop {
            if kills
                .last()
                .is_some_and(|k| cluster.global_step() >= k.at_step)
            {
                let k = kills.pop().expect("checked");
                log::info!("worker {index} killed at step {}", cluster.global_step());
                if k.restart {
                    thread::sleep(k.restart_after);
                    continue 'lives;
                }
                break 'lives;
            }
            let batch = match pending.take() {
                Some(b) => b,
                None => match batches.next() {
                    Some(b) => b?,
                    None => break 'lives,
                },
            };
            let Some(step) = cluster.claim_step() else {
                break 'lives;
            };
            let outcome = (|| -> Result<()> {
                for (v, name) in &pulled {
                    ctx.graph_mut().set_var_value(*v, cluster.read(name)?)?;
                }
                ctx.graph_mut().set_global_step(step - 1);
                let out = ctx.run(Some(&batch), &fetches)?;
                let l = out[0].scalar_value()?;
                if !l.is_finite() {
                    return Err(Error::NanLoss { step });
                }
                for ((name, slot, opt), grad) in pushes.iter().zip(&out[1..]) {
                    cluster.apply(name, slot.as_deref(), grad, opt)?;
                }
                Ok(())
            })();
            cluster.release_step();
            outcome?;
            applied += 1;
            if let Some(l) = leader.as_mut() {
                l.maybe_save(cluster)?;
            }
        }
    }

    if let Some(l) = leader.as_mut() {
        if !cluster.wait_initialized() {
            return Ok(applied);
        }
        // Peers may still be applying; keep the checkpoint cadence until
        // every claimed step has landed, then write the final state.
        while (cluster.active_workers() > 1 || cluster.in_flight() > 0) && !cluster.is_shutdown() {
            l.maybe_save(cluster)?;
            thread::sleep(Duration::from_millis(1));
        }
        if !cluster.is_shutdown() {
            l.save(cluster)?;
        }
    }
    Ok(applied)
}

/// Polls the model directory, evaluating each new checkpoint once. Corrupt
/// or vanished files are skipped; a checksum mismatch is an error.
pub(crate) fn run_evaluator(
    exp: &Experiment,
    stop: &dyn Fn() -> bool,
) -> Result<Vec<(u64, BTreeMap<String, f64>)>> {
    let est = &exp.estimator;
    let mut seen = BTreeSet::new();
    let mut results = Vec::new();
    loop {
        let finishing = stop();
        if let Some(path) = latest_checkpoint(est.model_dir())? {
            let step = step_from_file_name(&path);
            if step.is_none_or(|s| !seen.contains(&s)) {
                match restore_checkpoint(&path) {
                    Ok(ckpt) if seen.contains(&ckpt.global_step) => {}
                    Ok(ckpt) => {
                        verify_checksum(&ckpt)?;
                        let metrics = est.evaluate_checkpoint(
                            &exp.eval_input_fn,
                            exp.eval_steps,
                            Vec::new(),
                            &ckpt,
                            &path,
                        )?;
                        seen.insert(ckpt.global_step);
                        results.push((ckpt.global_step, metrics));
                    }
                    Err(e @ Error::CorruptCheckpoint { .. }) => {
                        log::warn!("evaluator skipping: {e}")
                    }
                    Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                        log::debug!("checkpoint {} pruned before it was read", path.display())
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if finishing {
            return Ok(results);
        }
        thread::sleep(exp.eval_poll);
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

/// Runs every task of `spec` as a thread sharing one simulated cluster and
/// returns once training is over and the final checkpoint is evaluated.
/// The first failing worker's error is returned after its peers have shut
/// down.
pub fn train_and_evaluate(
    exp: &Experiment,
    spec: ClusterSpec,
    faults: &FaultPlan,
) -> Result<ExperimentResult> {
    faults.validate(&spec)?;
    exp.estimator.config().validate()?;
    let cluster = Cluster::new(spec)?;
    cluster.set_step_limit(exp.train_steps);
    let started = Instant::now();
    cluster.set_deadline(exp.time_limit.map(|d| started + d));
    let eval_stop = AtomicBool::new(false);
    let start_step = match latest_checkpoint(exp.estimator.model_dir())? {
        Some(p) => checkpoint_step(&p)?,
        None => 0,
    };

    let (worker_results, eval_result, elapsed) = thread::scope(|s| {
        let workers: Vec<_> = (0..spec.num_workers)
            .map(|i| {
                let cluster = &cluster;
                thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn_scoped(s, move || {
                        let r = run_worker(cluster, exp, i, faults);
                        if r.is_err() {
                            cluster.request_shutdown();
                        }
                        r
                    })
                    .expect("spawn worker")
            })
            .collect();
        let servers: Vec<_> = (0..spec.num_ps)
            .map(|i| {
                let cluster = &cluster;
                let task = TaskSpec {
                    task_type: TaskType::Ps,
                    index: i,
                };
                s.spawn(move || run_task(cluster, exp, task, faults))
            })
            .collect();
        let evaluator = spec.evaluator.then(|| {
            let stop = || eval_stop.load(Ordering::SeqCst) || cluster.is_shutdown();
            s.spawn(move || run_evaluator(exp, &stop))
        });

        let mut results = Vec::new();
        for (i, h) in workers.into_iter().enumerate() {
            let r = h.join().unwrap_or_else(|p| {
                cluster.request_shutdown();
                Err(Error::TaskFailed {
                    task: format!("worker {i}"),
                    reason: panic_message(p),
                })
            });
            results.push(r);
        }
        let trained = started.elapsed();
        cluster.mark_training_done();
        eval_stop.store(true, Ordering::SeqCst);
        for h in servers {
            if let Err(p) = h.join() {
                log::error!("ps task panicked: {}", panic_message(p));
            }
        }
        let eval = evaluator.map(|h| {
            h.join().unwrap_or_else(|p| {
                Err(Error::TaskFailed {
                    task: "evaluator".into(),
                    reason: panic_message(p),
                })
            })
        });
        (results, eval, trained)
    });

    let mut worker_batches = Vec::new();
    for r in worker_results {
        worker_batches.push(r?);
    }
    let evaluations = eval_result.transpose()?.unwrap_or_default();
    let global_step = cluster.global_step();
    debug_assert_eq!(worker_batches.iter().sum::<u64>(), global_step - start_step);

    let metrics = match evaluations.last() {
        Some((step, m)) if *step == global_step => m.clone(),
        _ => exp
            .estimator
            .evaluate(&exp.eval_input_fn, exp.eval_steps, Vec::new(), None)?,
    };
    Ok(ExperimentResult {
        global_step,
        metrics,
        worker_batches,
        evaluated_steps: evaluations.iter().map(|(s, _)| *s).collect(),
        elapsed,
    })
}
