//! Training-loop hooks and the loop driver that invokes them.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model_fn::EstimatorSpec;
use crate::tensor::Tensor;

pub const SCALAR_LOG_FILE: &str = "scalar_logs.csv";
pub const SCALAR_LOG_HEADER: &str = "wall_time,step,name,value";

/// What a hook can see about the graph it is attached to. Node ids are only
/// valid for the run this setup was produced for.
#[derive(Clone, Debug)]
pub struct HookSetup {
    pub spec: EstimatorSpec,
    pub variables: BTreeMap<String, NodeId>,
    pub model_dir: Option<PathBuf>,
}

impl HookSetup {
    /// Resolves "loss", a prediction name, or a variable name.
    pub fn node(&self, name: &str) -> Option<NodeId> {
        if name == "loss" {
            return self.spec.loss;
        }
        self.spec
            .predictions
            .get(name)
            .or_else(|| self.variables.get(name))
            .copied()
    }
}

#[derive(Debug, Default)]
pub struct RunContext {
    global_step: u64,
    last_loss: Option<f64>,
    stop: bool,
    checkpoint: bool,
}

impl RunContext {
    pub fn new(global_step: u64) -> Self {
        RunContext {
            global_step,
            ..RunContext::default()
        }
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    /// The loop exits once the current iteration's `after_run` calls finish.
    pub fn request_stop(&mut self) {
        self.stop = true;
    }

    pub fn stop_requested(&self) -> bool {
        self.stop
    }

    /// Asks the owner of the loop to write a checkpoint after this iteration.
    pub fn request_checkpoint(&mut self) {
        self.checkpoint = true;
    }

    pub fn take_checkpoint_request(&mut self) -> bool {
        std::mem::take(&mut self.checkpoint)
    }

    pub fn record(&mut self, global_step: u64, loss: Option<f64>) {
        self.global_step = global_step;
        self.last_loss = loss;
    }
}

#[allow(unused_variables)]
pub trait Hook: Send {
    fn begin(&mut self, setup: &HookSetup) -> Result<()> {
        Ok(())
    }

    fn after_session_start(&mut self, ctx: &mut RunContext) -> Result<()> {
        Ok(())
    }

    /// Extra nodes to evaluate in the same execution as the loop body.
    fn before_run(&mut self, ctx: &RunContext) -> Result<Vec<NodeId>> {
        Ok(Vec::new())
    }

    /// `fetched` holds the values of this hook's `before_run` requests.
    fn after_run(&mut self, ctx: &mut RunContext, fetched: &[Tensor]) -> Result<()> {
        Ok(())
    }

    fn end(&mut self, ctx: &RunContext) -> Result<()> {
        Ok(())
    }
}

/// One iteration of a hooked loop, split so exhaustion is known before any
/// `before_run` call.
pub trait LoopBody {
    /// Readies the next iteration; `false` ends the loop.
    fn prepare(&mut self, ctx: &mut RunContext) -> Result<bool>;

    /// Runs the iteration and returns the values of `extra`, in order.
    fn run(&mut self, extra: &[NodeId], ctx: &mut RunContext) -> Result<Vec<Tensor>>;

    /// Called after every hook's `after_run`.
    fn after_iteration(&mut self, _ctx: &mut RunContext) -> Result<()> {
        Ok(())
    }
}

/// Drives `body` until a hook requests a stop or the body runs out of input.
/// Any error ends the loop; `end` still runs on every hook.
pub fn run_loop_with_hooks(
    hooks: &mut [Box<dyn Hook>],
    setup: &HookSetup,
    ctx: &mut RunContext,
    body: &mut dyn LoopBody,
) -> Result<()> {
    let outcome = (|| {
        for h in hooks.iter_mut() {
            h.begin(setup)?;
        }
        for h in hooks.iter_mut() {
            h.after_session_start(ctx)?;
        }
        while !ctx.stop_requested() && body.prepare(ctx)? {
            let mut requests = Vec::new();
            let mut counts = Vec::with_capacity(hooks.len());
            for h in hooks.iter_mut() {
                let r = h.before_run(ctx)?;
                counts.push(r.len());
                requests.extend(r);
            }
            let fetched = body.run(&requests, ctx)?;
            let mut start = 0;
            for (h, n) in hooks.iter_mut().zip(counts) {
                h.after_run(ctx, &fetched[start..start + n])?;
                start += n;
            }
            body.after_iteration(ctx)?;
        }
        Ok(())
    })();
    let mut end_error = None;
    for h in hooks.iter_mut() {
        if let Err(e) = h.end(ctx) {
            end_error.get_or_insert(e);
        }
    }
    match (outcome, end_error) {
        (Err(e), _) | (Ok(()), Some(e)) => Err(e),
        _ => Ok(()),
    }
}

/// Stops once global_step reaches `last_step`.
pub struct StopAtStep {
    last_step: u64,
}

impl StopAtStep {
    pub fn new(last_step: u64) -> Self {
        StopAtStep { last_step }
    }
}

impl Hook for StopAtStep {
    fn after_session_start(&mut self, ctx: &mut RunContext) -> Result<()> {
        if ctx.global_step() >= self.last_step {
            ctx.request_stop();
        }
        Ok(())
    }

    fn after_run(&mut self, ctx: &mut RunContext, _: &[Tensor]) -> Result<()> {
        if ctx.global_step() >= self.last_step {
            ctx.request_stop();
        }
        Ok(())
    }
}

/// Stops at the first iteration boundary after `duration` has elapsed since
/// `begin`.
pub struct TimeBasedStop {
    duration: Duration,
    started: Option<Instant>,
}

impl TimeBasedStop {
    pub fn new(duration: Duration) -> Self {
        TimeBasedStop {
            duration,
            started: None,
        }
    }
}

impl Hook for TimeBasedStop {
    fn begin(&mut self, _: &HookSetup) -> Result<()> {
        self.started = Some(Instant::now());
        Ok(())
    }

    fn after_run(&mut self, ctx: &mut RunContext, _: &[Tensor]) -> Result<()> {
        if self.started.is_some_and(|t| t.elapsed() >= self.duration) {
            ctx.request_stop();
        }
        Ok(())
    }
}

/// Requests a checkpoint at every multiple of `every_n` steps.
pub struct CheckpointSaver {
    every_n: u64,
}

impl CheckpointSaver {
    pub fn new(every_n: u64) -> Result<Self> {
        if every_n == 0 {
            return Err(Error::invalid("checkpoint interval must be at least 1"));
        }
        Ok(CheckpointSaver { every_n })
    }
}

impl Hook for CheckpointSaver {
    fn after_run(&mut self, ctx: &mut RunContext, _: &[Tensor]) -> Result<()> {
        if ctx.global_step().is_multiple_of(self.every_n) {
            ctx.request_checkpoint();
        }
        Ok(())
    }
}

fn wall_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Appends `(wall_time, step, name, value)` rows to a scalar log, writing the
/// header when the file is new.
pub fn append_scalar(path: &std::path::Path, step: u64, name: &str, value: f64) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{SCALAR_LOG_HEADER}")?;
    }
    writeln!(file, "{:.6},{step},{name},{value}", wall_time())?;
    Ok(())
}

/// Logs global steps per second every `every_n` steps (and once at the end
/// for a partial window) to `scalar_logs.csv` in the model directory.
pub struct StepCounter {
    every_n: u64,
    path: Option<PathBuf>,
    window_start: Option<(Instant, u64)>,
    rows: usize,
}

impl StepCounter {
    pub fn new(every_n: u64) -> Self {
        StepCounter {
            every_n: every_n.max(1),
            path: None,
            window_start: None,
            rows: 0,
        }
    }

    /// Rows written so far.
    pub fn rows(&self) -> usize {
        self.rows
    }

    fn flush(&mut self, step: u64) -> Result<()> {
        let Some((t0, s0)) = self.window_start else {
            return Ok(());
        };
        if step <= s0 {
            return Ok(());
        }
        let elapsed = t0.elapsed().as_secs_f64().max(1e-9);
        let rate = (step - s0) as f64 / elapsed;
        if let Some(path) = &self.path {
            append_scalar(path, step, "global_step/sec", rate)?;
        }
        log::info!("global_step/sec: {rate:.3} (step {step})");
        self.rows += 1;
        self.window_start = Some((Instant::now(), step));
        Ok(())
    }
}

impl Hook for StepCounter {
    fn begin(&mut self, setup: &HookSetup) -> Result<()> {
        self.path = setup.model_dir.as_ref().map(|d| d.join(SCALAR_LOG_FILE));
        Ok(())
    }

    fn after_session_start(&mut self, ctx: &mut RunContext) -> Result<()> {
        self.window_start = Some((Instant::now(), ctx.global_step()));
        Ok(())
    }

    fn after_run(&mut self, ctx: &mut RunContext, _: &[Tensor]) -> Result<()> {
        if ctx.global_step().is_multiple_of(self.every_n) {
            self.flush(ctx.global_step())?;
        }
        Ok(())
    }

    fn end(&mut self, ctx: &RunContext) -> Result<()> {
        self.flush(ctx.global_step())
    }
}

/// Logs named tensors ("loss", prediction or variable names) every `every_n`
/// iterations.
pub struct Logging {
    names: Vec<String>,
    every_n: u64,
    nodes: Vec<NodeId>,
    iteration: u64,
}

impl Logging {
    pub fn new(names: &[&str], every_n: u64) -> Self {
        Logging {
            names: names.iter().map(|s| s.to_string()).collect(),
            every_n: every_n.max(1),
            nodes: Vec::new(),
            iteration: 0,
        }
    }
}

impl Hook for Logging {
    fn begin(&mut self, setup: &HookSetup) -> Result<()> {
        self.nodes = self
            .names
            .iter()
            .map(|n| {
                setup
                    .node(n)
                    .ok_or_else(|| Error::Hook(format!("logging: unknown tensor {n}")))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn before_run(&mut self, _: &RunContext) -> Result<Vec<NodeId>> {
        self.iteration += 1;
        Ok(if self.iteration.is_multiple_of(self.every_n) {
            self.nodes.clone()
        } else {
            Vec::new()
        })
    }

    fn after_run(&mut self, ctx: &mut RunContext, fetched: &[Tensor]) -> Result<()> {
        for (name, t) in self.names.iter().zip(fetched) {
            log::info!("step {}: {name} = {:?}", ctx.global_step(), t.data());
        }
        Ok(())
    }
}
