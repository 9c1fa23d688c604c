//! Streaming metrics fed over a random partition, against a one-pass oracle
//! computed directly on the full data.

use estimator::graph::StaticShape;
use estimator::layers::{metric, MetricKind};
use estimator::{ExecutionContext, Graph, InputBatch, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Data {
    class: Vec<f64>,
    scores: Vec<[f64; 3]>,
    target: Vec<[f64; 2]>,
    pred: Vec<[f64; 2]>,
    loss: Vec<f64>,
    weight: Vec<f64>,
}

impl Data {
    fn random(rng: &mut ChaCha8Rng, n: usize) -> Data {
        Data {
            class: (0..n).map(|_| rng.gen_range(0..3) as f64).collect(),
            scores: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            target: (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect(),
            pred: (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect(),
            loss: (0..n).map(|_| rng.gen_range(0.0..5.0)).collect(),
            weight: (0..n).map(|_| rng.gen_range(0.1..2.0)).collect(),
        }
    }

    fn batch(&self, lo: usize, hi: usize) -> InputBatch {
        let rows = |v: &[[f64; 2]]| Tensor::from_rows(&v[lo..hi].iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        InputBatch::new()
            .with_label("class", Tensor::vector(self.class[lo..hi].to_vec()))
            .with_label(
                "scores",
                Tensor::from_rows(&self.scores[lo..hi].iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            )
            .with_label("target", rows(&self.target))
            .with_label("pred", rows(&self.pred))
            .with_label("loss", Tensor::vector(self.loss[lo..hi].to_vec()))
            .with_label("w", Tensor::vector(self.weight[lo..hi].to_vec()))
    }

    /// (mean, accuracy, mse, average_loss) in one pass over all rows.
    fn oracle(&self) -> [f64; 4] {
        let wsum: f64 = self.weight.iter().sum();
        let wmean = |v: &dyn Fn(usize) -> f64| (0..self.weight.len()).map(|i| self.weight[i] * v(i)).sum::<f64>() / wsum;
        let argmax = |r: &[f64; 3]| {
            let mut best = 0;
            for k in 1..3 {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best as f64
        };
        [
            wmean(&|i| self.loss[i]),
            wmean(&|i| (argmax(&self.scores[i]) == self.class[i]) as u8 as f64),
            wmean(&|i| {
                let d0 = self.pred[i][0] - self.target[i][0];
                let d1 = self.pred[i][1] - self.target[i][1];
                (d0 * d0 + d1 * d1) / 2.0
            }),
            wmean(&|i| self.loss[i]),
        ]
    }
}

/// Largest |streaming − oracle| over four metric kinds for one random
/// dataset split at random cut points.
pub fn partition_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=60);
    let data = Data::random(&mut rng, n);
    let mut cuts: Vec<usize> = (0..rng.gen_range(0..n.min(8) + 1)).map(|_| rng.gen_range(1..=n)).collect();
    cuts.extend([0, n]);
    cuts.sort_unstable();
    cuts.dedup();

    let mut g = Graph::new(0);
    let scalar = StaticShape::batched(&[]);
    let class = g.label_input("class", scalar.clone());
    let scores = g.label_input("scores", StaticShape::batched(&[3]));
    let target = g.label_input("target", StaticShape::batched(&[2]));
    let pred = g.label_input("pred", StaticShape::batched(&[2]));
    let loss = g.label_input("loss", scalar.clone());
    let w = g.label_input("w", scalar);
    let metrics = [
        metric(&mut g, MetricKind::Mean, "mean", None, loss, Some(w)).unwrap(),
        metric(&mut g, MetricKind::Accuracy, "accuracy", Some(class), scores, Some(w)).unwrap(),
        metric(&mut g, MetricKind::MeanSquaredError, "mse", Some(target), pred, Some(w)).unwrap(),
        metric(&mut g, MetricKind::AverageLoss, "average_loss", None, loss, Some(w)).unwrap(),
    ];
    let updates: Vec<_> = metrics.iter().map(|m| m.update).collect();
    let values: Vec<_> = metrics.iter().map(|m| m.value).collect();
    let mut ctx = ExecutionContext::new(g);
    for pair in cuts.windows(2) {
        ctx.run(Some(&data.batch(pair[0], pair[1])), &updates).unwrap();
    }
    let streamed = ctx.run(None, &values).unwrap();
    streamed
        .iter()
        .zip(data.oracle())
        .map(|(s, o)| (s.scalar_value().unwrap() - o).abs())
        .fold(0.0, f64::max)
}
