//! End-to-end acceptance run. Each criterion prints one line; the process
//! exits non-zero if any criterion fails. Run with `cargo test --test
//! acceptance` (add `--release` for realistic timings).

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use estimator::canned::{self, CannedConfig};
use estimator::estimator::{restore_checkpoint, save_checkpoint, Checkpoint, CheckpointManager, WRITER_FILE};
use estimator::experiment::{
    benchmark_experiment, benchmark_scaling, verify_checksum, CHECKSUM_VARIABLE,
};
use estimator::feature_columns::{crossed, embedding, hashed, numeric};
use estimator::hooks::{HookSetup, Logging, RunContext, StepCounter, StopAtStep, TimeBasedStop};
use estimator::{
    train_and_evaluate, ClusterSpec, Error, Estimator, Experiment, FaultPlan, FeatureBatch,
    FeatureValue, Hook, InputBatch, NodeId, RunConfig, ServingInputSpec, ServingModel, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims()
        && a.data().len() == b.data().len()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn same_checkpoint(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.global_step == b.global_step
        && a.variables.len() == b.variables.len()
        && a.variables.iter().zip(&b.variables).all(|((n, x), (m, y))| n == m && same_bits(x, y))
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(e2s)
}

fn c1_gradients() -> Outcome {
    let started = Instant::now();
    let results = gradcheck::run_suite();
    let elapsed = started.elapsed();
    let mut worst = 0.0f64;
    for (name, r) in &results {
        match r {
            Ok(err) if *err < gradcheck::TOLERANCE => worst = worst.max(*err),
            Ok(err) => return Err(format!("{name}: relative error {err:.3e}")),
            Err(e) => return Err(format!("{name}: {e}")),
        }
    }
    ensure!(elapsed < Duration::from_secs(60), "suite took {elapsed:?}");
    Ok(format!("{} cases, max rel error {worst:.2e}, {elapsed:.2?}", results.len()))
}

fn c2_streaming() -> Outcome {
    let worst = (0..100).map(streaming::partition_error).fold(0.0f64, f64::max);
    ensure!(worst <= 1e-9, "max deviation {worst:.3e}");
    Ok(format!("100 partitions, max deviation {worst:.2e}"))
}

fn c3_contract() -> Outcome {
    let grid = contract::run_grid();
    let failed: Vec<_> = grid
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    ensure!(failed.is_empty(), "{}", failed.join("; "));
    Ok(format!("{} variants x 4 methods", grid.len()))
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let n = rng.gen_range(1..6);
    let variables = (0..n)
        .map(|i| {
            let dims: Vec<usize> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(1..5)).collect();
            let len = dims.iter().product();
            // Raw bit patterns cover NaN payloads, infinities, -0 and subnormals.
            let data = (0..len).map(|_| f64::from_bits(rng.gen())).collect();
            (format!("v{i}/w"), Tensor::new(dims, data).unwrap())
        })
        .collect();
    Checkpoint { global_step: rng.gen(), variables }
}

/// Fails in `before_run` once the global step reaches `at`, standing in for
/// a process dying mid-interval.
struct Crash {
    at: u64,
}

impl Hook for Crash {
    fn before_run(&mut self, ctx: &RunContext) -> estimator::Result<Vec<NodeId>> {
        if ctx.global_step() >= self.at {
            return Err(Error::Hook("simulated crash".into()));
        }
        Ok(Vec::new())
    }
}

fn resumable(dir: &Path) -> Result<Estimator, String> {
    let wide = vec![hashed("a", 16), hashed("b", 16), crossed(&["a", "b"], 64)];
    let deep = vec![embedding(hashed("a", 16), 3), embedding(hashed("b", 16), 3)];
    let cfg = CannedConfig::combined(wide, deep, vec![8]).with_dropout(0.2);
    let run = RunConfig::new(dir)
        .with_seed(17)
        .with_save_checkpoints_steps(10)
        .with_keep_checkpoint_max(100);
    canned::dnn_linear_combined_classifier(cfg, run).map_err(e2s)
}

fn c4_checkpoints() -> Outcome {
    let tmp = tempdir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..200 {
        let ck = random_checkpoint(&mut rng);
        let path = tmp.path().join(format!("r{i}.estckpt"));
        save_checkpoint(&path, &ck).map_err(e2s)?;
        let back = restore_checkpoint(&path).map_err(e2s)?;
        ensure!(same_checkpoint(&ck, &back), "roundtrip {i} differs");
    }

    let ck = random_checkpoint(&mut rng);
    let bytes = ck.to_bytes().map_err(e2s)?;
    let payload_start = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut injected = 0;
    for pos in (payload_start..bytes.len()).chain(0..8) {
        for bit in [0u8, 3, 7] {
            let mut bad = bytes.clone();
            bad[pos] ^= 1 << bit;
            ensure!(
                matches!(Checkpoint::from_bytes(&bad, Path::new("x")), Err(Error::CorruptCheckpoint { .. })),
                "flip at byte {pos} bit {bit} went undetected"
            );
            injected += 1;
        }
    }
    for len in 0..bytes.len() {
        ensure!(
            matches!(Checkpoint::from_bytes(&bytes[..len], Path::new("x")), Err(Error::CorruptCheckpoint { .. })),
            "truncation to {len} bytes went undetected"
        );
        injected += 1;
    }

    // 40 examples in batches of 4: one epoch per checkpoint interval, so a
    // restarted input pipeline lines up with the uninterrupted one.
    let data = categorical_xor(40, 3);
    let clean_dir = tempdir()?;
    let clean = resumable(clean_dir.path())?;
    clean.train(&forever(&data, 4), None, Some(60), vec![]).map_err(e2s)?;

    let crash_dir = tempdir()?;
    let crashed = resumable(crash_dir.path())?;
    match crashed.train(&forever(&data, 4), None, Some(60), vec![Box::new(Crash { at: 35 })]) {
        Err(Error::Hook(_)) => {}
        other => return Err(format!("crash hook did not abort training: {other:?}")),
    }
    let resumed_from = crashed.latest_checkpoint().map_err(e2s)?.ok_or("no checkpoint before crash")?;
    ensure!(
        restore_checkpoint(&resumed_from).map_err(e2s)?.global_step == 30,
        "expected the crash to leave step 30 as latest"
    );
    let step = resumable(crash_dir.path())?
        .train(&forever(&data, 4), None, Some(60), vec![])
        .map_err(e2s)?;
    ensure!(step == 60, "resumed run ended at {step}");
    for s in (10..=60).step_by(10) {
        let name = format!("model.ckpt-{s}.estckpt");
        let a = restore_checkpoint(&clean_dir.path().join(&name)).map_err(e2s)?;
        let b = restore_checkpoint(&crash_dir.path().join(&name)).map_err(e2s)?;
        ensure!(same_checkpoint(&a, &b), "trajectories diverge at step {s}");
    }
    Ok(format!(
        "200 roundtrips, {injected} corruptions detected, crash at 35 resumed from 30 matches steps 10..60"
    ))
}

fn random_serving_inputs(n: usize, seed: u64) -> InputBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cat = |rng: &mut ChaCha8Rng, p: &str| {
        // Some values the model never saw in training.
        FeatureValue::category(&format!("{p}{}", rng.gen_range(0..12)))
    };
    let a = (0..n).map(|_| cat(&mut rng, "a")).collect();
    let b = (0..n).map(|_| cat(&mut rng, "b")).collect();
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
    InputBatch::new()
        .with_feature("a", FeatureBatch::Values(a))
        .with_feature("b", FeatureBatch::Values(b))
        .with_dense("x", Tensor::from_rows(&x).unwrap())
}

fn c5_serving() -> Outcome {
    let tmp = tempdir()?;
    let wide = vec![hashed("a", 32), hashed("b", 32), crossed(&["a", "b"], 128)];
    let deep = vec![embedding(hashed("a", 32), 4), embedding(hashed("b", 32), 4), numeric("x", 2)];
    let columns: Vec<_> = wide.iter().chain(&deep).cloned().collect();
    let cfg = CannedConfig::combined(wide, deep, vec![8, 4]).with_n_classes(3).with_dropout(0.3);
    let est = canned::dnn_linear_combined_classifier(cfg, RunConfig::new(tmp.path().join("model")).with_seed(5))
        .map_err(e2s)?;
    let mut train = random_serving_inputs(300, 50);
    let labels = (0..300).map(|i| (i % 3) as f64).collect();
    train = train.with_label("label", Tensor::vector(labels));
    est.train(&forever(&train, 32), Some(100), None, vec![]).map_err(e2s)?;
    let export = est
        .export_savedmodel(&tmp.path().join("export"), &ServingInputSpec::from_columns(&columns))
        .map_err(e2s)?;

    let inputs = random_serving_inputs(1000, 51);
    let local: Vec<_> = est
        .predict(&once(&inputs, 128), None)
        .map_err(e2s)?
        .collect::<estimator::Result<_>>()
        .map_err(e2s)?;
    let mut served = ServingModel::load(&export).map_err(e2s)?;
    let mut remote = Vec::new();
    // Uneven request sizes, including single examples.
    let mut start = 0;
    for size in [1usize, 7, 100, 1, 391, 500].iter().cycle() {
        if start >= 1000 {
            break;
        }
        let end = (start + size).min(1000);
        let rows: Vec<usize> = (start..end).collect();
        remote.extend(served.predict(&inputs.select(&rows).map_err(e2s)?).map_err(e2s)?);
        start = end;
    }
    ensure!(local.len() == 1000 && remote.len() == 1000, "{} vs {} predictions", local.len(), remote.len());
    for (i, (l, r)) in local.iter().zip(&remote).enumerate() {
        ensure!(l.keys().eq(r.keys()), "example {i}: prediction keys differ");
        for (k, t) in l {
            ensure!(same_bits(t, &r[k]), "example {i}: {k} differs");
        }
    }
    Ok(format!("1000 inputs, {} outputs each, bit-identical", local[0].len()))
}

fn c6_wide_and_deep() -> Outcome {
    let started = Instant::now();
    let train = categorical_xor(2000, 1);
    let test = categorical_xor(1000, 2);
    let a = tempdir()?;
    let wd = wide_and_deep(a.path(), 1);
    wd.train(&forever(&train, 64), Some(1000), None, vec![]).map_err(e2s)?;
    let b = tempdir()?;
    let lin = linear_without_cross(b.path(), 1);
    lin.train(&forever(&train, 64), Some(1000), None, vec![]).map_err(e2s)?;
    let (acc_wd, acc_lin) = (accuracy(&wd, &test), accuracy(&lin, &test));
    let elapsed = started.elapsed();
    ensure!(acc_wd >= 0.95, "wide & deep accuracy {acc_wd}");
    ensure!(acc_lin <= 0.6, "linear without cross accuracy {acc_lin}");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("wide&deep {acc_wd:.3}, linear {acc_lin:.3}, {elapsed:.2?}"))
}

fn c7_xor() -> Outcome {
    let started = Instant::now();
    let data = xor_numeric();
    let mut solved = Vec::new();
    for seed in 0..10 {
        let dir = tempdir()?;
        let est = dnn_xor(dir.path(), seed);
        for k in 1..=20u64 {
            est.train(&forever(&data, 4), Some(100), None, vec![]).map_err(e2s)?;
            if accuracy(&est, &data) == 1.0 {
                solved.push((seed, k * 100));
                break;
            }
        }
    }
    let elapsed = started.elapsed();
    ensure!(solved.len() >= 9, "only {} of 10 seeds solved: {solved:?}", solved.len());
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    let slowest = solved.iter().map(|(_, s)| *s).max().unwrap_or(0);
    Ok(format!("{}/10 seeds, slowest at step {slowest}, {elapsed:.2?}", solved.len()))
}

fn churn_experiment(dir: &Path, seed: u64) -> Experiment {
    let cfg = CannedConfig::linear(vec![numeric("x", 3)]).with_linear_optimizer(estimator::Optimizer::sgd(0.05));
    let run = RunConfig::new(dir)
        .with_seed(seed)
        .with_save_checkpoints_steps(5)
        .with_keep_checkpoint_max(2);
    let est = canned::linear_regressor(cfg, run).unwrap();
    let data = convex_data(64, seed);
    Experiment::new(est, forever(&data, 8), once(&data, 64), 60).with_eval_poll(Duration::from_millis(1))
}

fn c8_distributed() -> Outcome {
    let mut evaluations = 0;
    for run in 0..100u64 {
        let tmp = tempdir()?;
        let exp = churn_experiment(tmp.path(), run);
        let faults = FaultPlan::none()
            .kill_and_restart(1 + (run % 3) as usize, 5 + run % 40)
            .kill(1 + ((run + 1) % 3) as usize, 30 + run % 25);
        let r = train_and_evaluate(&exp, ClusterSpec::new(2, 4).with_evaluator(), &faults)
            .map_err(|e| format!("run {run}: {e}"))?;
        ensure!(r.global_step == 60, "run {run}: global step {}", r.global_step);
        ensure!(!r.evaluated_steps.is_empty(), "run {run}: evaluator saw no checkpoint");
        ensure!(
            r.evaluated_steps.windows(2).all(|w| w[0] < w[1]),
            "run {run}: evaluations out of order {:?}",
            r.evaluated_steps
        );
        evaluations += r.evaluated_steps.len();
        let writer = fs::read_to_string(tmp.path().join(WRITER_FILE)).map_err(e2s)?;
        ensure!(writer.trim() == "chief", "run {run}: writer file says {writer:?}");
        let latest = exp.estimator.latest_checkpoint().map_err(e2s)?.ok_or("no checkpoint")?;
        let ck = restore_checkpoint(&latest).map_err(e2s)?;
        ensure!(ck.get(CHECKSUM_VARIABLE).is_some(), "run {run}: no checksum variable");
        verify_checksum(&ck).map_err(|e| format!("run {run}: {e}"))?;
        let intruder = CheckpointManager::new(tmp.path(), 2, "worker-1").save(&ck);
        ensure!(
            matches!(intruder, Err(Error::LeaderViolation { .. })),
            "run {run}: non-chief write was not rejected"
        );
    }
    Ok(format!("100/100 runs under churn, {evaluations} verified evaluations, writer always chief"))
}

fn c9_scaling() -> Result<(bool, String), String> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let enough = cores >= 4;
    let budget = if enough { Duration::from_secs(30) } else { Duration::from_secs(2) };
    let tmp = tempdir()?;
    let rows = benchmark_scaling(&|dir| benchmark_experiment(dir, 9), &[1, 2, 4], 2, budget, tmp.path())
        .map_err(e2s)?;
    let table = rows
        .iter()
        .map(|r| format!("{}w {:.1} steps/s ({:.2}x)", r.workers, r.steps_per_sec, r.speedup_vs_1))
        .collect::<Vec<_>>()
        .join(", ");
    if !enough {
        return Ok((false, format!("{cores} core(s) available, need 4; measured {table}")));
    }
    let increasing = rows.windows(2).all(|w| w[1].steps_per_sec > w[0].steps_per_sec);
    ensure!(increasing, "steps/sec not increasing: {table}");
    ensure!(rows[2].speedup_vs_1 >= 2.0, "4-worker speedup below 2x: {table}");
    Ok((true, table))
}

/// Fetches the loss and every variable each step without changing anything.
struct Observer {
    nodes: Vec<NodeId>,
    fetched: usize,
}

impl Hook for Observer {
    fn begin(&mut self, setup: &HookSetup) -> estimator::Result<()> {
        self.nodes = setup.spec.loss.into_iter().chain(setup.variables.values().copied()).collect();
        Ok(())
    }

    fn before_run(&mut self, _: &RunContext) -> estimator::Result<Vec<NodeId>> {
        Ok(self.nodes.clone())
    }

    fn after_run(&mut self, _: &mut RunContext, fetched: &[Tensor]) -> estimator::Result<()> {
        self.fetched += fetched.len();
        Ok(())
    }
}

fn c10_hooks() -> Outcome {
    let data = categorical_xor(256, 10);
    let a = tempdir()?;
    let est = wide_and_deep(a.path(), 10);
    let step = est
        .train(&forever(&data, 16), None, None, vec![Box::new(TimeBasedStop::new(Duration::ZERO))])
        .map_err(e2s)?;
    ensure!(step == 1, "time_based_stop(0) ran {step} steps");

    let step = est.train(&forever(&data, 16), None, Some(37), vec![]).map_err(e2s)?;
    ensure!(step == 37, "max_steps 37 ended at {step}");
    let step = est.train(&forever(&data, 16), Some(13), None, vec![]).map_err(e2s)?;
    ensure!(step == 50, "13 more steps ended at {step}");
    let step = est
        .train(&forever(&data, 16), None, Some(1000), vec![Box::new(StopAtStep::new(61))])
        .map_err(e2s)?;
    ensure!(step == 61, "stop_at_step(61) ended at {step}");

    let plain = tempdir()?;
    let watched = tempdir()?;
    wide_and_deep(plain.path(), 11)
        .train(&forever(&data, 16), Some(40), None, vec![])
        .map_err(e2s)?;
    wide_and_deep(watched.path(), 11)
        .train(
            &forever(&data, 16),
            Some(40),
            None,
            vec![
                Box::new(Observer { nodes: vec![], fetched: 0 }),
                Box::new(Logging::new(&["loss", "probabilities"], 1)),
                Box::new(StepCounter::new(1)),
            ],
        )
        .map_err(e2s)?;
    let name = "model.ckpt-40.estckpt";
    let x = restore_checkpoint(&plain.path().join(name)).map_err(e2s)?;
    let y = restore_checkpoint(&watched.path().join(name)).map_err(e2s)?;
    ensure!(same_checkpoint(&x, &y), "observing hooks changed the trained variables");
    Ok("time_based_stop(0) -> 1 step, stop points 37/50/61 exact, observed run bit-identical".into())
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("gradient suite", c1_gradients),
        ("streaming metrics", c2_streaming),
        ("harness contract grid", c3_contract),
        ("checkpoint durability", c4_checkpoints),
        ("export/serve identity", c5_serving),
        ("wide & deep on categorical XOR", c6_wide_and_deep),
        ("XOR convergence", c7_xor),
        ("distributed consistency", c8_distributed),
    ];
    let mut failures = 0;
    let report = |i: usize, name: &str, status: &str, detail: &str| {
        println!("criterion {i:>2} {name}: {status} ({detail})");
    };
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        match f() {
            Ok(d) => report(i + 1, name, "PASS", &d),
            Err(d) => {
                failures += 1;
                report(i + 1, name, "FAIL", &d);
            }
        }
    }
    match c9_scaling() {
        Ok((true, d)) => report(9, "worker scaling", "PASS", &d),
        Ok((false, d)) => report(9, "worker scaling", "UNVERIFIED", &d),
        Err(d) => {
            failures += 1;
            report(9, "worker scaling", "FAIL", &d);
        }
    }
    match c10_hooks() {
        Ok(d) => report(10, "hook suite", "PASS", &d),
        Err(d) => {
            failures += 1;
            report(10, "hook suite", "FAIL", &d);
        }
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
}
