//! The contract between a model function and the harness.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, StaticShape};
use crate::input::{Features, Labels};
use crate::layers::MetricPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
    Predict,
}

impl Mode {
    pub fn is_training(self) -> bool {
        self == Mode::Train
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "TRAIN",
            Mode::Eval => "EVAL",
            Mode::Predict => "PREDICT",
        })
    }
}

/// User hyperparameters handed to the model function.
pub type Params = BTreeMap<String, serde_json::Value>;

/// Builds the graph for one mode. Must only construct graph nodes.
pub type ModelFn = Arc<
    dyn Fn(&mut Graph, &Features, Option<&Labels>, Mode, &Params) -> Result<EstimatorSpec>
        + Send
        + Sync,
>;

/// One named output of the serving signature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSignature {
    pub name: String,
    /// Per-example dims (batch dimension dropped); `None` when unknown.
    pub dims: Vec<Option<usize>>,
}

/// What a model function returns.
#[derive(Clone, Debug)]
pub struct EstimatorSpec {
    pub mode: Mode,
    pub predictions: BTreeMap<String, NodeId>,
    pub loss: Option<NodeId>,
    pub train_op: Option<NodeId>,
    pub eval_metrics: BTreeMap<String, MetricPair>,
    pub export_outputs: Vec<OutputSignature>,
}

impl EstimatorSpec {
    pub fn new(mode: Mode) -> Self {
        EstimatorSpec {
            mode,
            predictions: BTreeMap::new(),
            loss: None,
            train_op: None,
            eval_metrics: BTreeMap::new(),
            export_outputs: Vec::new(),
        }
    }

    /// Signature derived from the prediction nodes' static shapes.
    pub fn signature_from_predictions(&mut self, g: &Graph) {
        self.export_outputs = self
            .predictions
            .iter()
            .map(|(name, &node)| OutputSignature {
                name: name.clone(),
                dims: g.shape(node).dims().get(1..).unwrap_or(&[]).to_vec(),
            })
            .collect();
    }

    /// Checks the per-mode field contract: TRAIN has loss and train_op,
    /// EVAL has loss and no train_op, PREDICT has predictions only; metrics
    /// only in EVAL; loss always scalar.
    pub fn validate(&self, g: &Graph, mode: Mode) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.mode != mode {
            return fail(format!(
                "spec built for {} returned to a {mode} call",
                self.mode
            ));
        }
        if let Some(loss) = self.loss {
            if g.shape(loss) != &StaticShape::scalar() {
                return Err(Error::NonScalarLoss(g.shape(loss).dims().to_vec()));
            }
        }
        match mode {
            Mode::Train => {
                if self.loss.is_none() {
                    return fail("TRAIN spec has no loss".into());
                }
                if self.train_op.is_none() {
                    return fail("TRAIN spec has no train_op".into());
                }
            }
            Mode::Eval => {
                if self.loss.is_none() {
                    return fail("EVAL spec has no loss".into());
                }
                if self.train_op.is_some() {
                    return fail("EVAL spec must not carry a train_op".into());
                }
            }
            Mode::Predict => {
                if self.predictions.is_empty() {
                    return fail("PREDICT spec has no predictions".into());
                }
                if self.loss.is_some() || self.train_op.is_some() {
                    return fail("PREDICT spec must not carry loss or train_op".into());
                }
            }
        }
        if mode != Mode::Eval && !self.eval_metrics.is_empty() {
            return fail(format!("{mode} spec must not carry eval metrics"));
        }
        Ok(())
    }
}
