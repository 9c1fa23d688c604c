//! The harness contract grid: each public method against each head and each
//! canned estimator, with an instrumented model function.

use std::sync::{Arc, Mutex};

use estimator::canned::{canned_model_fn, CannedConfig, EstimatorType};
use estimator::feature_columns::{embedding, hashed, input_layer, numeric};
use estimator::heads::{create_estimator_spec, HeadInput};
use estimator::layers::{dense, Activation};
use estimator::{
    Estimator, FeatureBatch, FeatureValue, Head, InputBatch, InputFn, Mode, ModelFn, Optimizer, Params, RunConfig,
    ServingInputSpec, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Call {
    pub mode: Mode,
    /// Graph size on entry; equal across calls when every call gets a fresh graph.
    pub nodes_on_entry: usize,
    pub vars_on_entry: usize,
    pub labels: bool,
    pub loss: bool,
    pub train_op: bool,
    pub predictions: usize,
    pub metrics: usize,
}

pub type Calls = Arc<Mutex<Vec<Call>>>;

pub fn instrument(inner: ModelFn, calls: Calls) -> ModelFn {
    Arc::new(move |g, features, labels, mode, params| {
        let nodes_on_entry = g.len();
        let vars_on_entry = g.variables().len();
        let spec = inner(g, features, labels, mode, params)?;
        calls.lock().unwrap().push(Call {
            mode,
            nodes_on_entry,
            vars_on_entry,
            labels: labels.is_some(),
            loss: spec.loss.is_some(),
            train_op: spec.train_op.is_some(),
            predictions: spec.predictions.len(),
            metrics: spec.eval_metrics.len(),
        });
        Ok(spec)
    })
}

/// A model function written once against the head interface.
pub fn head_model_fn(head: Head) -> ModelFn {
    Arc::new(move |g, features, labels, mode, _params: &Params| {
        let x = input_layer(g, features, &[numeric("x", 3)])?;
        let h = dense(g, x, 4, Activation::Tanh)?;
        let logits = dense(g, h, head.logits_dimension(), Activation::Linear)?;
        let train = |g: &mut estimator::Graph, loss| Optimizer::sgd(0.05).minimize(g, loss);
        create_estimator_spec(&head, g, features, labels, mode, HeadInput::Logits(logits), Some(&train))
    })
}

pub fn heads() -> Vec<(&'static str, Head)> {
    vec![
        ("multi_class", Head::multi_class(3)),
        ("binary", Head::binary()),
        ("regression", Head::regression(2)),
        (
            "multi",
            Head::multi(
                vec![
                    Head::multi_class(3).with_name("cls").with_label("c"),
                    Head::regression(1).with_name("reg").with_label("r"),
                ],
                vec![1.0, 0.5],
            )
            .unwrap(),
        ),
    ]
}

fn labels_for(head: &Head, n: usize, rng: &mut ChaCha8Rng, batch: InputBatch) -> InputBatch {
    match head {
        Head::MultiClass { n_classes, label_name, .. } => {
            batch.with_label(label_name, Tensor::vector((0..n).map(|_| rng.gen_range(0..*n_classes) as f64).collect()))
        }
        Head::Binary { label_name, .. } => {
            batch.with_label(label_name, Tensor::vector((0..n).map(|_| rng.gen_range(0..2) as f64).collect()))
        }
        Head::Regression { label_dim, label_name, .. } => {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..*label_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            batch.with_label(label_name, Tensor::from_rows(&rows).unwrap())
        }
        Head::Multi { children, .. } => children.iter().fold(batch, |b, c| labels_for(c, n, rng, b)),
    }
}

pub fn data_for(head: &Head, n: usize, seed: u64) -> InputBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let q = (0..n).map(|_| FeatureValue::category(&format!("q{}", rng.gen_range(0..5)))).collect();
    let batch = InputBatch::new()
        .with_dense("x", Tensor::from_rows(&x).unwrap())
        .with_feature("q", FeatureBatch::Values(q));
    labels_for(head, n, &mut rng, batch)
}

pub fn canned_config(kind: EstimatorType) -> CannedConfig {
    let wide = vec![numeric("x", 3), hashed("q", 8)];
    let deep = vec![numeric("x", 3), embedding(hashed("q", 8), 2)];
    match kind {
        EstimatorType::LinearClassifier => CannedConfig::linear(wide).with_n_classes(3),
        EstimatorType::LinearRegressor => CannedConfig::linear(wide),
        EstimatorType::DnnClassifier => CannedConfig::dnn(vec![4, 3], deep).with_n_classes(3),
        EstimatorType::DnnRegressor => CannedConfig::dnn(vec![4], deep),
        EstimatorType::DnnLinearCombinedClassifier => CannedConfig::combined(wide, deep, vec![4]),
    }
}

/// Runs train, evaluate, predict and export once each, checking after each
/// call that the model function ran exactly once, in the matching mode, on
/// a fresh graph, and returned the fields that mode requires.
pub fn check_methods(model_fn: ModelFn, data: &InputBatch, dir: &std::path::Path) -> Result<(), String> {
    let calls: Calls = Arc::default();
    let est = Estimator::new(instrument(model_fn, calls.clone()), Params::new(), RunConfig::new(dir.join("model")))
        .map_err(|e| e.to_string())?;
    let train = InputFn::from_batch(data.clone(), 8, None, Some(1)).unwrap();
    let once = InputFn::from_batch(data.clone(), 8, Some(1), None).unwrap();
    let features_only = InputFn::from_batch(
        InputBatch {
            labels: Default::default(),
            ..data.clone()
        },
        8,
        Some(1),
        None,
    )
    .unwrap();

    let expect = |method: &str, mode: Mode| -> Result<Call, String> {
        let mut c = calls.lock().unwrap();
        if c.len() != 1 {
            return Err(format!("{method}: model_fn called {} times", c.len()));
        }
        let call = c.remove(0);
        if call.mode != mode {
            return Err(format!("{method}: called in {} mode", call.mode));
        }
        Ok(call)
    };
    let e = |err: estimator::Error| err.to_string();

    est.train(&train, Some(5), None, Vec::new()).map_err(e)?;
    let t = expect("train", Mode::Train)?;
    if !(t.labels && t.loss && t.train_op) {
        return Err(format!("train spec contract: {t:?}"));
    }

    let metrics = est.evaluate(&once, None, Vec::new(), None).map_err(e)?;
    let ev = expect("evaluate", Mode::Eval)?;
    if !(ev.labels && ev.loss && !ev.train_op && ev.metrics > 0) || !metrics.contains_key("global_step") {
        return Err(format!("evaluate spec contract: {ev:?}"));
    }

    let preds: Vec<_> = est.predict(&features_only, None).map_err(e)?.collect::<Result<_, _>>().map_err(e)?;
    let p = expect("predict", Mode::Predict)?;
    if p.labels || p.loss || p.train_op || p.predictions == 0 || preds.len() != data.batch_size() {
        return Err(format!("predict spec contract: {p:?}, {} rows", preds.len()));
    }

    est.export_savedmodel(&dir.join("export"), &ServingInputSpec::from_signature(&data.signature()))
        .map_err(e)?;
    let x = expect("export", Mode::Predict)?;
    if x.labels || x.loss || x.predictions == 0 {
        return Err(format!("export spec contract: {x:?}"));
    }

    for c in [&ev, &p, &x] {
        if (c.nodes_on_entry, c.vars_on_entry) != (t.nodes_on_entry, t.vars_on_entry) {
            return Err(format!("{} call saw a reused graph", c.mode));
        }
    }
    Ok(())
}

/// Every cell of the grid with its outcome.
pub fn run_grid() -> Vec<(String, Result<(), String>)> {
    let mut out = Vec::new();
    for (name, head) in heads() {
        let dir = tempfile::tempdir().unwrap();
        let data = data_for(&head, 24, 3);
        out.push((format!("head {name}"), check_methods(head_model_fn(head), &data, dir.path())));
    }
    for kind in EstimatorType::ALL {
        let cfg = canned_config(kind);
        let head = cfg.head(kind);
        let dir = tempfile::tempdir().unwrap();
        let data = data_for(&head, 24, 4);
        let model_fn = canned_model_fn(kind, cfg).unwrap();
        out.push((format!("canned {kind}"), check_methods(model_fn, &data, dir.path())));
    }
    out
}
