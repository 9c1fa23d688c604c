//! Shared fixtures for the criterion benches.

use estimator::{FeatureBatch, FeatureValue, InputBatch, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid dims")
}

/// Two eight-valued categorical features with an XOR-of-parity label.
pub fn categorical_xor(n: usize, seed: u64) -> InputBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let (i, j) = (rng.gen_range(0..8usize), rng.gen_range(0..8usize));
        a.push(FeatureValue::category(&format!("a{i}")));
        b.push(FeatureValue::category(&format!("b{j}")));
        y.push(((i ^ j) & 1) as f64);
    }
    InputBatch::new()
        .with_feature("a", FeatureBatch::Values(a))
        .with_feature("b", FeatureBatch::Values(b))
        .with_label("label", Tensor::vector(y))
}

/// Dense regression data, `y = sum(x)`.
pub fn dense_regression(n: usize, dim: usize, seed: u64) -> InputBatch {
    let x = random_tensor(&[n, dim], seed);
    let y: Vec<f64> = x.data().chunks(dim).map(|r| r.iter().sum()).collect();
    InputBatch::new()
        .with_dense("x", x)
        .with_label("label", Tensor::new(vec![n, 1], y).expect("n rows"))
}
