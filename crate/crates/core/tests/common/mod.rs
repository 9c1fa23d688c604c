#![allow(dead_code)]

pub mod gradcheck;
pub mod streaming;
pub mod contract;

use std::path::Path;

use estimator::canned::{self, CannedConfig};
use estimator::feature_columns::{crossed, embedding, hashed, numeric};
use estimator::{Estimator, FeatureBatch, FeatureValue, InputBatch, InputFn, Optimizer, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRUE_W: [f64; 3] = [1.5, -2.0, 0.5];
pub const TRUE_B: f64 = 0.25;

/// Noise-free least squares: y = x·w + b.
pub fn convex_data(n: usize, seed: u64) -> InputBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = x.iter().zip(TRUE_W).map(|(a, w)| a * w).sum::<f64>() + TRUE_B;
        xs.push(x);
        ys.push(vec![y]);
    }
    InputBatch::new()
        .with_dense("x", Tensor::from_rows(&xs).unwrap())
        .with_label("label", Tensor::from_rows(&ys).unwrap())
}

pub fn convex_estimator(dir: &Path, seed: u64, lr: f64) -> Estimator {
    let cfg = CannedConfig::linear(vec![numeric("x", 3)]).with_linear_optimizer(Optimizer::sgd(lr));
    canned::linear_regressor(cfg, RunConfig::new(dir).with_seed(seed).with_save_checkpoints_steps(50)).unwrap()
}

pub fn xor_numeric() -> InputBatch {
    InputBatch::new()
        .with_dense(
            "x",
            Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap(),
        )
        .with_label("label", Tensor::vector(vec![0.0, 1.0, 1.0, 0.0]))
}

/// Two categorical features with eight values each; the label is the XOR of
/// their parities, so no additive function of the two separates it.
pub fn categorical_xor(n: usize, seed: u64) -> InputBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let i: usize = rng.gen_range(0..8);
        let j: usize = rng.gen_range(0..8);
        a.push(FeatureValue::category(&format!("a{i}")));
        b.push(FeatureValue::category(&format!("b{j}")));
        y.push(((i % 2) ^ (j % 2)) as f64);
    }
    InputBatch::new()
        .with_feature("a", FeatureBatch::Values(a))
        .with_feature("b", FeatureBatch::Values(b))
        .with_label("label", Tensor::vector(y))
}

pub fn wide_and_deep(dir: &Path, seed: u64) -> Estimator {
    let wide = vec![hashed("a", 64), hashed("b", 64), crossed(&["a", "b"], 1024)];
    let deep = vec![embedding(hashed("a", 64), 4), embedding(hashed("b", 64), 4)];
    let cfg = CannedConfig::combined(wide, deep, vec![16, 8]);
    canned::dnn_linear_combined_classifier(cfg, RunConfig::new(dir).with_seed(seed)).unwrap()
}

pub fn linear_without_cross(dir: &Path, seed: u64) -> Estimator {
    let cfg = CannedConfig::linear(vec![hashed("a", 64), hashed("b", 64)]);
    canned::linear_classifier(cfg, RunConfig::new(dir).with_seed(seed)).unwrap()
}

pub fn dnn_xor(dir: &Path, seed: u64) -> Estimator {
    let cfg = CannedConfig::dnn(vec![8], vec![numeric("x", 2)]).with_dnn_optimizer(Optimizer::sgd(0.1));
    canned::dnn_classifier(cfg, RunConfig::new(dir).with_seed(seed)).unwrap()
}

pub fn forever(data: &InputBatch, batch_size: usize) -> InputFn {
    InputFn::from_batch(data.clone(), batch_size, None, None).unwrap()
}

pub fn once(data: &InputBatch, batch_size: usize) -> InputFn {
    InputFn::from_batch(data.clone(), batch_size, Some(1), None).unwrap()
}

/// Fraction of argmax predictions matching the label.
pub fn accuracy(est: &Estimator, data: &InputBatch) -> f64 {
    let labels = data.labels["label"].data().to_vec();
    let preds: Vec<_> = est
        .predict(&once(data, 256), None)
        .unwrap()
        .map(|p| p.unwrap()["class_id"].data()[0])
        .collect();
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
