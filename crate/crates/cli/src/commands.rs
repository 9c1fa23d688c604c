//! One function per subcommand. Each returns what the binary prints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use estimator::estimator::PredictionMap;
use estimator::experiment::{
    benchmark_experiment, benchmark_scaling, write_scaling_csv, ScalingRow,
};
use estimator::{
    train_and_evaluate, ClusterSpec, Experiment, FaultPlan, InputBatch, InputFn, RunConfig,
    ServingInputSpec,
};
use serde_json::{json, Map, Value};

use crate::config::JobConfig;
use crate::CliError;

fn train_batch(job: &JobConfig) -> Result<InputBatch> {
    let csv = job.read_csv(job.train_csv()?, true)?;
    Ok(csv.to_batch(&job.feature_kinds(), Some(job.label_spec()))?)
}

fn eval_batch(job: &JobConfig) -> Result<InputBatch> {
    let csv = job.read_csv(job.eval_csv()?, true)?;
    Ok(csv.to_batch(&job.feature_kinds(), Some(job.label_spec()))?)
}

fn train_input(job: &JobConfig, batch: InputBatch) -> Result<InputFn> {
    Ok(InputFn::from_batch(batch, job.data.batch_size, None, job.data.shuffle_seed)?)
}

fn eval_input(job: &JobConfig, batch: InputBatch) -> Result<InputFn> {
    Ok(InputFn::from_batch(batch, job.data.batch_size, Some(1), None)?)
}

fn metrics_json(metrics: &BTreeMap<String, f64>) -> Value {
    Value::Object(metrics.iter().map(|(k, v)| (k.clone(), json!(v))).collect())
}

fn experiment(job: &JobConfig, run: RunConfig) -> Result<Experiment> {
    let est = job.estimator_in(run)?;
    let train = train_input(job, train_batch(job)?)?;
    let eval = eval_input(job, eval_batch(job)?)?;
    let mut exp = Experiment::new(est, train, eval, job.train_steps);
    exp.eval_steps = job.eval_steps;
    Ok(exp)
}

/// Trains up to global step `train_steps`. With a cluster in the run
/// configuration every role runs in-process and the final checkpoint is
/// evaluated; the printed object then carries its metrics.
pub fn train(job: &JobConfig) -> Result<Value> {
    let cluster = job.run.cluster;
    if cluster.num_workers > 0 {
        log::info!(
            "simulating {} worker(s) and {} parameter server(s); task {:?} is ignored",
            cluster.num_workers,
            cluster.num_ps,
            job.run.task
        );
        let exp = experiment(job, job.run.clone())?;
        let spec = ClusterSpec::from_run_config(&job.run).with_evaluator();
        let r = train_and_evaluate(&exp, spec, &FaultPlan::none())?;
        let mut out = metrics_json(&r.metrics);
        out["global_step"] = json!(r.global_step);
        return Ok(out);
    }
    let est = job.estimator()?;
    let input = train_input(job, train_batch(job)?)?;
    let step = est.train(&input, None, Some(job.train_steps), Vec::new())?;
    Ok(json!({ "global_step": step }))
}

pub fn evaluate(job: &JobConfig) -> Result<Value> {
    let est = job.estimator()?;
    let input = eval_input(job, eval_batch(job)?)?;
    let metrics = est.evaluate(&input, job.eval_steps, Vec::new(), None)?;
    Ok(metrics_json(&metrics))
}

fn prediction_json(p: &PredictionMap) -> Value {
    let fields: Map<String, Value> = p
        .iter()
        .map(|(k, t)| (k.clone(), json!(t.data())))
        .collect();
    Value::Object(fields)
}

/// Writes one JSON object per input row to `output` and returns the count.
pub fn predict(job: &JobConfig, input: &Path, output: &Path) -> Result<Value> {
    let est = job.estimator()?;
    let csv = job.read_csv(input, false)?;
    let batch = csv.to_batch(&job.feature_kinds(), None)?;
    let input_fn = InputFn::from_batch(batch, job.data.batch_size, Some(1), None)?;
    let file = File::create(output).with_context(|| format!("creating {}", output.display()))?;
    let mut out = BufWriter::new(file);
    let mut rows = 0usize;
    for p in est.predict(&input_fn, None)? {
        serde_json::to_writer(&mut out, &prediction_json(&p?))?;
        out.write_all(b"\n")?;
        rows += 1;
    }
    out.flush()?;
    Ok(json!({ "predictions": rows, "output": output }))
}

pub fn export(job: &JobConfig, dir: &Path) -> Result<Value> {
    let est = job.estimator()?;
    let serving = ServingInputSpec::from_columns(&job.columns());
    let path = est.export_savedmodel(dir, &serving)?;
    Ok(json!({ "export_dir": path }))
}

pub struct ScalingOptions {
    pub workers: Vec<usize>,
    pub num_ps: usize,
    pub budget: Duration,
    pub scratch: PathBuf,
    pub seed: u64,
}

/// Runs the scaling benchmark on the job's model, or on the built-in
/// compute-bound model when no job is given.
pub fn benchmark(job: Option<&JobConfig>, opts: &ScalingOptions) -> Result<Vec<ScalingRow>> {
    if opts.workers.is_empty() {
        return Err(CliError::Config("--workers must name at least one count".into()).into());
    }
    fs::create_dir_all(&opts.scratch)?;
    let make = |dir: &Path| -> estimator::Result<Experiment> {
        match job {
            Some(job) => {
                let mut run = job.run.clone();
                run.model_dir = dir.to_path_buf();
                experiment(job, run).map_err(|e| estimator::Error::Config(format!("{e:#}")))
            }
            None => benchmark_experiment(dir, opts.seed),
        }
    };
    Ok(benchmark_scaling(&make, &opts.workers, opts.num_ps, opts.budget, &opts.scratch)?)
}

/// Human-readable table with the ideal linear speedup alongside.
pub fn scaling_table(rows: &[ScalingRow]) -> String {
    let base = rows.first().map_or(1, |r| r.workers) as f64;
    let mut s = format!("{:>7} {:>13} {:>12} {:>12}\n", "workers", "steps_per_sec", "speedup_vs_1", "ideal_linear");
    for r in rows {
        s.push_str(&format!(
            "{:>7} {:>13.3} {:>12.4} {:>12.4}\n",
            r.workers,
            r.steps_per_sec,
            r.speedup_vs_1,
            r.workers as f64 / base
        ));
    }
    s
}

pub fn write_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    Ok(write_scaling_csv(path, rows)?)
}
