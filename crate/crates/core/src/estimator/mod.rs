//! The harness: train, evaluate, predict and export over a model function.
//!
//! Every public method builds a fresh graph, calls the model function once
//! with the matching mode, restores the relevant checkpoint and drops the
//! graph on return.

pub mod checkpoint;
mod config;
mod export;

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_step, latest_checkpoint, restore_checkpoint, save_checkpoint, step_from_file_name,
    Checkpoint, CheckpointIndex, CheckpointManager, INDEX_FILE, WRITER_FILE,
};
pub use config::{ClusterConfig, RunConfig, TaskSpec, TaskType};
pub use export::{ExportManifest, ServingInputSpec, ServingModel};

use crate::error::{Error, Result};
use crate::graph::{ExecutionContext, Graph, NodeId};
use crate::hooks::{
    run_loop_with_hooks, CheckpointSaver, Hook, HookSetup, LoopBody, RunContext, StepCounter,
    StopAtStep,
};
use crate::input::{BatchIter, Features, InputBatch, InputFn, InputSignature, Labels};
use crate::model_fn::{EstimatorSpec, Mode, ModelFn, Params};
use crate::tensor::Tensor;

pub const EVAL_RECORDS_FILE: &str = "eval_records.jsonl";
/// Writer id of the single task allowed to write checkpoints.
pub const CHIEF_WRITER: &str = "chief";

/// One prediction map per example.
pub type PredictionMap = BTreeMap<String, Tensor>;

/// Enough information to rebuild a model function without the original
/// closure, used by exports of canned models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: String,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub global_step: u64,
    pub checkpoint: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone)]
pub struct Estimator {
    model_fn: ModelFn,
    params: Params,
    config: RunConfig,
    descriptor: Option<ModelDescriptor>,
}

impl Estimator {
    pub fn new(model_fn: ModelFn, params: Params, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Estimator {
            model_fn,
            params,
            config,
            descriptor: None,
        })
    }

    pub fn with_descriptor(mut self, descriptor: ModelDescriptor) -> Self {
        self.descriptor = Some(descriptor);
        self
    }

    pub fn descriptor(&self) -> Option<&ModelDescriptor> {
        self.descriptor.as_ref()
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model_dir(&self) -> &Path {
        &self.config.model_dir
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Takes effect on the next method call.
    pub fn set_params(&mut self, params: Params) {
        self.params = params;
    }

    pub fn model_fn(&self) -> &ModelFn {
        &self.model_fn
    }

    /// Builds a fresh graph for `mode` and checks the returned spec.
    pub fn build_graph(
        &self,
        mode: Mode,
        signature: &InputSignature,
    ) -> Result<(Graph, EstimatorSpec)> {
        build_graph(
            &self.model_fn,
            &self.params,
            self.config.seed,
            mode,
            signature,
        )
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        latest_checkpoint(self.model_dir())
    }

    fn checkpoint_or_latest(&self, path: Option<&Path>) -> Result<PathBuf> {
        match path {
            Some(p) => Ok(p.to_path_buf()),
            None => self
                .latest_checkpoint()?
                .ok_or_else(|| Error::NoTrainedModel(self.model_dir().to_path_buf())),
        }
    }

    /// Trains until `steps` more iterations, global step `max_steps`, input
    /// exhaustion, or a hook stop, whichever comes first. Returns the final
    /// global step.
    pub fn train(
        &self,
        input_fn: &InputFn,
        steps: Option<u64>,
        max_steps: Option<u64>,
        hooks: Vec<Box<dyn Hook>>,
    ) -> Result<u64> {
        let start_ckpt = self.latest_checkpoint()?;
        let start_step = match &start_ckpt {
            Some(p) => restore_checkpoint(p)?.global_step,
            None => 0,
        };
        let last_step = match (steps, max_steps) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid("set at most one of steps and max_steps"))
            }
            (Some(s), None) => Some(start_step + s),
            (None, Some(m)) if m <= start_step => return Ok(start_step),
            (None, m) => m,
        };

        let mut batches = input_fn.call()?;
        let first = batches.next().ok_or(Error::EmptyInput)??;
        let (mut g, spec) = self.build_graph(Mode::Train, &first.signature())?;
        if let Some(p) = &start_ckpt {
            restore_checkpoint(p)?.restore_into(&mut g)?;
        }
        let setup = hook_setup(&mut g, &spec, Some(self.model_dir()));

        let mut all_hooks = hooks;
        if let Some(last) = last_step {
            all_hooks.push(Box::new(StopAtStep::new(last)));
        }
        all_hooks.push(Box::new(CheckpointSaver::new(
            self.config.save_checkpoints_steps,
        )?));
        all_hooks.push(Box::new(StepCounter::new(self.config.log_step_count_steps)));

        let mut body = TrainBody {
            ctx: ExecutionContext::new(g),
            first: Some(first),
            batches,
            pending: None,
            loss: spec.loss.expect("validated"),
            train_op: spec.train_op.expect("validated"),
            manager: CheckpointManager::new(
                self.model_dir(),
                self.config.keep_checkpoint_max,
                CHIEF_WRITER,
            ),
        };
        let mut ctx = RunContext::new(body.ctx.graph().global_step_value());
        run_loop_with_hooks(&mut all_hooks, &setup, &mut ctx, &mut body)?;
        let step = body.ctx.graph().global_step_value();
        if body.manager.last_saved() != Some(step) && (step != start_step || start_ckpt.is_none()) {
            body.manager
                .save(&Checkpoint::from_graph(body.ctx.graph()))?;
        }
        Ok(step)
    }

    /// Runs every metric update over the input (or `steps` batches), then
    /// reads the metric values. Appends one record to `eval_records.jsonl`.
    pub fn evaluate(
        &self,
        input_fn: &InputFn,
        steps: Option<u64>,
        hooks: Vec<Box<dyn Hook>>,
        checkpoint_path: Option<&Path>,
    ) -> Result<BTreeMap<String, f64>> {
        let path = self.checkpoint_or_latest(checkpoint_path)?;
        let ckpt = restore_checkpoint(&path)?;
        self.evaluate_checkpoint(input_fn, steps, hooks, &ckpt, &path)
    }

    /// Evaluates an already loaded checkpoint.
    pub fn evaluate_checkpoint(
        &self,
        input_fn: &InputFn,
        steps: Option<u64>,
        mut hooks: Vec<Box<dyn Hook>>,
        ckpt: &Checkpoint,
        path: &Path,
    ) -> Result<BTreeMap<String, f64>> {
        let mut batches = input_fn.call()?;
        let first = batches.next().ok_or(Error::EmptyInput)??;
        let (mut g, spec) = self.build_graph(Mode::Eval, &first.signature())?;
        ckpt.restore_into(&mut g)?;
        let setup = hook_setup(&mut g, &spec, Some(self.model_dir()));
        let mut body = EvalBody {
            ctx: ExecutionContext::new(g),
            first: Some(first),
            batches,
            pending: None,
            updates: spec.eval_metrics.values().map(|m| m.update).collect(),
            limit: steps,
            done: 0,
        };
        let mut ctx = RunContext::new(ckpt.global_step);
        run_loop_with_hooks(&mut hooks, &setup, &mut ctx, &mut body)?;

        let names: Vec<&String> = spec.eval_metrics.keys().collect();
        let values: Vec<NodeId> = spec.eval_metrics.values().map(|m| m.value).collect();
        let out = body.ctx.run(None, &values)?;
        let mut metrics = BTreeMap::new();
        for (name, t) in names.into_iter().zip(out) {
            metrics.insert(name.clone(), t.scalar_value()?);
        }
        let record = EvalRecord {
            global_step: ckpt.global_step,
            checkpoint: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            metrics: metrics.clone(),
        };
        append_eval_record(self.model_dir(), &record)?;
        metrics.insert("global_step".to_string(), ckpt.global_step as f64);
        Ok(metrics)
    }

    /// Lazily yields one prediction map per input example, in input order.
    pub fn predict(
        &self,
        input_fn: &InputFn,
        checkpoint_path: Option<&Path>,
    ) -> Result<Predictions> {
        let path = self.checkpoint_or_latest(checkpoint_path)?;
        let ckpt = restore_checkpoint(&path)?;
        let mut batches = input_fn.call()?;
        let Some(first) = batches.next().transpose()? else {
            return Ok(Predictions::empty());
        };
        let (mut g, spec) = self.build_graph(Mode::Predict, &first.signature())?;
        ckpt.restore_into(&mut g)?;
        Ok(Predictions {
            ctx: Some(ExecutionContext::new(g)),
            names: spec.predictions.keys().cloned().collect(),
            nodes: spec.predictions.values().copied().collect(),
            first: Some(first),
            batches: Some(batches),
            buffer: VecDeque::new(),
        })
    }

    /// Writes a self-contained serving directory under `export_dir_base`.
    pub fn export_savedmodel(
        &self,
        export_dir_base: &Path,
        serving: &ServingInputSpec,
    ) -> Result<PathBuf> {
        export::export(self, export_dir_base, serving)
    }
}

pub(crate) fn build_graph(
    model_fn: &ModelFn,
    params: &Params,
    seed: u64,
    mode: Mode,
    signature: &InputSignature,
) -> Result<(Graph, EstimatorSpec)> {
    let mut g = Graph::new(seed);
    let features = Features::new(signature.features.clone());
    let labels = Labels::new(signature.labels.clone());
    let labels = (mode != Mode::Predict).then_some(&labels);
    let spec = model_fn(&mut g, &features, labels, mode, params)?;
    spec.validate(&g, mode)?;
    Ok((g, spec))
}

fn hook_setup(g: &mut Graph, spec: &EstimatorSpec, model_dir: Option<&Path>) -> HookSetup {
    let variables = g
        .variables()
        .into_iter()
        .map(|v| (g.var_def(v).name.clone(), g.read(v)))
        .collect();
    HookSetup {
        spec: spec.clone(),
        variables,
        model_dir: model_dir.map(Path::to_path_buf),
    }
}

pub fn append_eval_record(model_dir: &Path, record: &EvalRecord) -> Result<()> {
    fs::create_dir_all(model_dir)?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(model_dir.join(EVAL_RECORDS_FILE))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

pub fn read_eval_records(model_dir: &Path) -> Result<Vec<EvalRecord>> {
    let text = match fs::read_to_string(model_dir.join(EVAL_RECORDS_FILE)) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn next_batch(
    first: &mut Option<InputBatch>,
    batches: &mut BatchIter,
) -> Result<Option<InputBatch>> {
    match first.take() {
        Some(b) => Ok(Some(b)),
        None => batches.next().transpose(),
    }
}

struct TrainBody {
    ctx: ExecutionContext,
    first: Option<InputBatch>,
    batches: BatchIter,
    pending: Option<InputBatch>,
    loss: NodeId,
    train_op: NodeId,
    manager: CheckpointManager,
}

impl LoopBody for TrainBody {
    fn prepare(&mut self, _: &mut RunContext) -> Result<bool> {
        self.pending = next_batch(&mut self.first, &mut self.batches)?;
        Ok(self.pending.is_some())
    }

    fn run(&mut self, extra: &[NodeId], ctx: &mut RunContext) -> Result<Vec<Tensor>> {
        let batch = self.pending.take().expect("prepared");
        let mut fetches = vec![self.loss, self.train_op];
        fetches.extend_from_slice(extra);
        let mut out = self.ctx.run(Some(&batch), &fetches)?;
        let step = self.ctx.graph().global_step_value();
        let loss = out[0].scalar_value()?;
        if loss.is_nan() {
            return Err(Error::NanLoss { step });
        }
        ctx.record(step, Some(loss));
        Ok(out.split_off(2))
    }

    fn after_iteration(&mut self, ctx: &mut RunContext) -> Result<()> {
        if ctx.take_checkpoint_request() {
            self.manager
                .save(&Checkpoint::from_graph(self.ctx.graph()))?;
        }
        Ok(())
    }
}

struct EvalBody {
    ctx: ExecutionContext,
    first: Option<InputBatch>,
    batches: BatchIter,
    pending: Option<InputBatch>,
    updates: Vec<NodeId>,
    limit: Option<u64>,
    done: u64,
}

impl LoopBody for EvalBody {
    fn prepare(&mut self, _: &mut RunContext) -> Result<bool> {
        if self.limit.is_some_and(|l| self.done >= l) {
            return Ok(false);
        }
        self.pending = next_batch(&mut self.first, &mut self.batches)?;
        Ok(self.pending.is_some())
    }

    fn run(&mut self, extra: &[NodeId], _: &mut RunContext) -> Result<Vec<Tensor>> {
        let batch = self.pending.take().expect("prepared");
        let mut fetches = self.updates.clone();
        fetches.extend_from_slice(extra);
        let mut out = self.ctx.run(Some(&batch), &fetches)?;
        self.done += 1;
        Ok(out.split_off(self.updates.len()))
    }
}

/// Runs the prediction nodes on one batch and splits the batch dimension.
pub(crate) fn predict_batch(
    ctx: &mut ExecutionContext,
    names: &[String],
    nodes: &[NodeId],
    batch: &InputBatch,
) -> Result<Vec<PredictionMap>> {
    let out = ctx.run(Some(batch), nodes)?;
    let n = out.first().map(Tensor::batch_size).unwrap_or(0);
    (0..n)
        .map(|i| {
            names
                .iter()
                .zip(&out)
                .map(|(name, t)| Ok((name.clone(), t.row(i)?)))
                .collect()
        })
        .collect()
}

/// Lazy prediction stream returned by [`Estimator::predict`].
pub struct Predictions {
    ctx: Option<ExecutionContext>,
    names: Vec<String>,
    nodes: Vec<NodeId>,
    first: Option<InputBatch>,
    batches: Option<BatchIter>,
    buffer: VecDeque<PredictionMap>,
}

impl Predictions {
    fn empty() -> Self {
        Predictions {
            ctx: None,
            names: Vec::new(),
            nodes: Vec::new(),
            first: None,
            batches: None,
            buffer: VecDeque::new(),
        }
    }
}

impl Iterator for Predictions {
    type Item = Result<PredictionMap>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(p) = self.buffer.pop_front() {
                return Some(Ok(p));
            }
            let (ctx, batches) = (self.ctx.as_mut()?, self.batches.as_mut()?);
            let batch = match next_batch(&mut self.first, batches) {
                Ok(Some(b)) => b,
                Ok(None) => {
                    self.ctx = None;
                    return None;
                }
                Err(e) => {
                    self.ctx = None;
                    return Some(Err(e));
                }
            };
            match predict_batch(ctx, &self.names, &self.nodes, &batch) {
                Ok(rows) => self.buffer.extend(rows),
                Err(e) => {
                    self.ctx = None;
                    return Some(Err(e));
                }
            }
        }
    }
}
