//! Streaming metrics: an update op folds one minibatch into accumulator
//! variables, a value op reads the accumulators only.

use serde::{Deserialize, Serialize};

use super::losses::{align, as_vector, reduce_per_example};
use crate::error::{Error, Result};
use crate::graph::{Collection, Graph, Initializer, NodeId, Reuse, VarId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricPair {
    pub update: NodeId,
    pub value: NodeId,
    pub total: VarId,
    pub count: VarId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Weighted mean of `predictions` (labels unused).
    Mean,
    /// Rate at which predicted class ids (or argmax of scores) equal labels.
    Accuracy,
    MeanSquaredError,
    /// Weighted mean of a per-example loss passed as `predictions`.
    AverageLoss,
}

/// Builds a streaming metric. `weights`, if given, has one entry per example
/// (or per element for `Mean`).
pub fn metric(
    g: &mut Graph,
    kind: MetricKind,
    name: &str,
    labels: Option<NodeId>,
    predictions: NodeId,
    weights: Option<NodeId>,
) -> Result<MetricPair> {
    let need_labels =
        || labels.ok_or_else(|| Error::invalid(format!("metric {name} needs labels")));
    let values = match kind {
        MetricKind::Mean => predictions,
        MetricKind::AverageLoss => as_vector(g, predictions)?,
        MetricKind::Accuracy => {
            let labels = as_vector(g, need_labels()?)?;
            let pred_rank = g.shape(predictions).rank();
            let ids = if pred_rank == 2 && g.shape(predictions).dim(1) != Some(1) {
                g.argmax(predictions)?
            } else {
                as_vector(g, predictions)?
            };
            g.equal(ids, labels)?
        }
        MetricKind::MeanSquaredError => {
            let labels = align(g, need_labels()?, predictions)?;
            let diff = g.sub(predictions, labels)?;
            let sq = g.square(diff)?;
            reduce_per_example(g, sq, true)?
        }
    };
    streaming_mean(g, name, values, weights)
}

fn streaming_mean(
    g: &mut Graph,
    name: &str,
    values: NodeId,
    weights: Option<NodeId>,
) -> Result<MetricPair> {
    let weights = match weights {
        Some(w) => {
            let w = if g.shape(values).rank() == 1 {
                as_vector(g, w)?
            } else {
                w
            };
            if !g.shape(w).compatible(g.shape(values)) {
                return Err(Error::shape(
                    "metric",
                    g.shape(values).dims(),
                    g.shape(w).dims(),
                ));
            }
            w
        }
        None => g.ones_like(values)?,
    };
    let scope = g.unique_scope(&sanitize(name));
    let (total, count) = g.root_scope(|g| {
        g.variable_scope("metrics", None, |g| {
            g.variable_scope(&scope, None, |g| {
                let local = |g: &mut Graph, n: &str| {
                    g.get_variable_with(
                        n,
                        &[],
                        Initializer::Zeros,
                        Some(Reuse::No),
                        false,
                        Collection::Local,
                    )
                };
                Ok((local(g, "total")?, local(g, "count")?))
            })
        })
    })?;
    let weighted = g.mul(values, weights)?;
    let batch_total = g.reduce_sum(weighted, None)?;
    let batch_count = g.reduce_sum(weights, None)?;
    let add_total = g.assign_add(total.id, batch_total)?;
    let add_count = g.assign_add(count.id, batch_count)?;
    let update = g.group(&[add_total, add_count])?;
    let value = g.ratio(total.node, count.node, name)?;
    Ok(MetricPair {
        update,
        value,
        total: total.id,
        count: count.id,
    })
}

fn sanitize(name: &str) -> String {
    name.replace('/', "_")
}
