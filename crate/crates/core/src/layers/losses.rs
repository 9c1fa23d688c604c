use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Per-example sum of absolute errors.
    L1,
    /// Per-example sum of squared errors.
    L2,
    /// Per-example mean of squared errors.
    MeanSquaredError,
    /// Logits `[batch, n]` against integer labels `[batch]`.
    SoftmaxCrossEntropy,
    /// Elementwise logistic loss against 0/1 labels, averaged per example.
    SigmoidCrossEntropy,
}

/// Per-example loss `[batch]`, before the weighted reduction.
pub fn per_example_loss(
    g: &mut Graph,
    kind: LossKind,
    predictions: NodeId,
    labels: NodeId,
) -> Result<NodeId> {
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let labels = as_vector(g, labels)?;
            g.sparse_softmax_cross_entropy(predictions, labels)
        }
        LossKind::SigmoidCrossEntropy => {
            let labels = align(g, labels, predictions)?;
            let x = g.sigmoid_cross_entropy(predictions, labels, true)?;
            reduce_per_example(g, x, true)
        }
        LossKind::L1 | LossKind::L2 | LossKind::MeanSquaredError => {
            let labels = align(g, labels, predictions)?;
            let diff = g.sub(predictions, labels)?;
            match kind {
                LossKind::L1 => {
                    let a = g.abs(diff)?;
                    reduce_per_example(g, a, false)
                }
                LossKind::L2 => {
                    let sq = g.square(diff)?;
                    reduce_per_example(g, sq, false)
                }
                _ => {
                    let sq = g.square(diff)?;
                    reduce_per_example(g, sq, true)
                }
            }
        }
    }
}

/// Scalar loss: weighted mean of the per-example loss over the batch
/// (weight defaults to 1; all-zero weights give 0).
pub fn loss(
    g: &mut Graph,
    kind: LossKind,
    predictions: NodeId,
    labels: NodeId,
    weights: Option<NodeId>,
) -> Result<NodeId> {
    let per_example = per_example_loss(g, kind, predictions, labels)?;
    let weights = match weights {
        Some(w) => as_vector(g, w)?,
        None => g.scalar(1.0),
    };
    g.weighted_mean(per_example, weights)
}

/// Reduces everything after the batch dimension (sum or mean).
pub(crate) fn reduce_per_example(g: &mut Graph, x: NodeId, mean: bool) -> Result<NodeId> {
    let shape = g.shape(x).clone();
    match shape.rank() {
        0 => Err(Error::invalid(
            "per-example reduction needs a batch dimension",
        )),
        1 => Ok(x),
        2 => {
            if mean {
                g.reduce_mean(x, Some(1))
            } else {
                g.reduce_sum(x, Some(1))
            }
        }
        _ => {
            let flat = super::flatten(g, x)?;
            reduce_per_example(g, flat, mean)
        }
    }
}

/// `[batch, 1]` → `[batch]`; rank-1 passes through.
pub(crate) fn as_vector(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).clone();
    match shape.rank() {
        1 => Ok(x),
        2 if shape.dim(1) == Some(1) => g.reshape(x, &[-1]),
        _ => Err(Error::invalid(format!(
            "expected one value per example, got shape {shape}"
        ))),
    }
}

/// Reshapes labels to the prediction layout when they differ only by a
/// trailing unit dimension.
pub(crate) fn align(g: &mut Graph, labels: NodeId, like: NodeId) -> Result<NodeId> {
    let ls = g.shape(labels).clone();
    let ps = g.shape(like).clone();
    if ls.compatible(&ps) {
        return Ok(labels);
    }
    if ls.rank() + 1 == ps.rank() && ps.dims().last() == Some(&Some(1)) {
        return g.reshape(labels, &[-1, 1]);
    }
    if ls.rank() == ps.rank() + 1 && ls.dims().last() == Some(&Some(1)) {
        return g.reshape(labels, &[-1]);
    }
    Err(Error::shape("loss", ps.dims(), ls.dims()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ExecutionContext;
    use crate::tensor::Tensor;

    fn scalar_loss(kind: LossKind, pred: Tensor, label: Tensor, w: Option<Tensor>) -> Result<f64> {
        let mut g = Graph::new(0);
        let p = g.constant(pred);
        let l = g.constant(label);
        let w = w.map(|w| g.constant(w));
        let out = loss(&mut g, kind, p, l, w)?;
        let mut ctx = ExecutionContext::new(g);
        ctx.eval(None, out)?.scalar_value()
    }

    #[test]
    fn mse_single() {
        let v = scalar_loss(
            LossKind::MeanSquaredError,
            Tensor::vector(vec![3.0]),
            Tensor::vector(vec![1.0]),
            None,
        )
        .unwrap();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn softmax_xent_symmetric() {
        let v = scalar_loss(
            LossKind::SoftmaxCrossEntropy,
            Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            Tensor::vector(vec![0.0]),
            None,
        )
        .unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_loss() {
        let v = scalar_loss(
            LossKind::L2,
            Tensor::vector(vec![3.0, 5.0]),
            Tensor::vector(vec![1.0, 1.0]),
            Some(Tensor::vector(vec![0.0, 0.0])),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn weight_shape_mismatch() {
        let r = scalar_loss(
            LossKind::L1,
            Tensor::vector(vec![3.0, 5.0]),
            Tensor::vector(vec![1.0, 1.0]),
            Some(Tensor::vector(vec![1.0, 1.0, 1.0])),
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn label_out_of_range() {
        let r = scalar_loss(
            LossKind::SoftmaxCrossEntropy,
            Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            Tensor::vector(vec![2.0]),
            None,
        );
        assert!(matches!(r, Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn l1_l2_per_example_sums() {
        let pred = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let lab = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l1 = scalar_loss(LossKind::L1, pred.clone(), lab.clone(), None).unwrap();
        let l2 = scalar_loss(LossKind::L2, pred.clone(), lab.clone(), None).unwrap();
        let mse = scalar_loss(LossKind::MeanSquaredError, pred, lab, None).unwrap();
        assert_eq!(l1, (3.0 + 1.0) / 2.0);
        assert_eq!(l2, (5.0 + 1.0) / 2.0);
        assert_eq!(mse, (2.5 + 0.5) / 2.0);
    }
}
