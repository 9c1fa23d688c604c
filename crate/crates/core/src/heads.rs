//! Heads: everything behind the last hidden layer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::input::{Features, Labels};
use crate::layers::{metric, per_example_loss, Dense, LossKind, MetricKind, MetricPair};
use crate::model_fn::{EstimatorSpec, Mode};

pub const DEFAULT_LABEL: &str = "label";
pub const DEFAULT_HEAD: &str = "head";

fn default_label() -> String {
    DEFAULT_LABEL.to_string()
}

fn default_head() -> String {
    DEFAULT_HEAD.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    MultiClass {
        n_classes: usize,
        #[serde(default = "default_label")]
        label_name: String,
        #[serde(default = "default_head")]
        head_name: String,
        #[serde(default)]
        weight_column: Option<String>,
    },
    Binary {
        #[serde(default = "default_label")]
        label_name: String,
        #[serde(default = "default_head")]
        head_name: String,
        #[serde(default)]
        weight_column: Option<String>,
    },
    Regression {
        label_dim: usize,
        #[serde(default = "default_label")]
        label_name: String,
        #[serde(default = "default_head")]
        head_name: String,
        #[serde(default)]
        weight_column: Option<String>,
    },
    Multi {
        children: Vec<Head>,
        loss_weights: Vec<f64>,
    },
}

/// What the head is fed: logits of the right width, or a hidden activation
/// on top of which the head builds its own logits layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInput {
    Logits(NodeId),
    LastLayer(NodeId),
}

/// Builds the train op from the total loss.
pub type TrainOpFn<'a> = &'a dyn Fn(&mut Graph, NodeId) -> Result<NodeId>;

struct HeadOutput {
    predictions: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
    metrics: BTreeMap<String, MetricPair>,
}

impl Head {
    pub fn multi_class(n_classes: usize) -> Head {
        Head::MultiClass {
            n_classes,
            label_name: default_label(),
            head_name: default_head(),
            weight_column: None,
        }
    }

    pub fn binary() -> Head {
        Head::Binary {
            label_name: default_label(),
            head_name: default_head(),
            weight_column: None,
        }
    }

    pub fn regression(label_dim: usize) -> Head {
        Head::Regression {
            label_dim,
            label_name: default_label(),
            head_name: default_head(),
            weight_column: None,
        }
    }

    pub fn multi(children: Vec<Head>, loss_weights: Vec<f64>) -> Result<Head> {
        let head = Head::Multi {
            children,
            loss_weights,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn with_label(mut self, name: &str) -> Head {
        if let Some((label, _, _)) = self.names_mut() {
            *label = name.to_string();
        }
        self
    }

    pub fn with_name(mut self, name: &str) -> Head {
        if let Some((_, head, _)) = self.names_mut() {
            *head = name.to_string();
        }
        self
    }

    pub fn with_weight_column(mut self, column: &str) -> Head {
        if let Some((_, _, w)) = self.names_mut() {
            *w = Some(column.to_string());
        }
        self
    }

    fn names_mut(&mut self) -> Option<(&mut String, &mut String, &mut Option<String>)> {
        match self {
            Head::MultiClass {
                label_name,
                head_name,
                weight_column,
                ..
            }
            | Head::Binary {
                label_name,
                head_name,
                weight_column,
            }
            | Head::Regression {
                label_name,
                head_name,
                weight_column,
                ..
            } => Some((label_name, head_name, weight_column)),
            Head::Multi { .. } => None,
        }
    }

    pub fn head_name(&self) -> Option<&str> {
        match self {
            Head::MultiClass { head_name, .. }
            | Head::Binary { head_name, .. }
            | Head::Regression { head_name, .. } => Some(head_name),
            Head::Multi { .. } => None,
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        match self {
            Head::MultiClass { label_name, .. }
            | Head::Binary { label_name, .. }
            | Head::Regression { label_name, .. } => {
                vec![label_name.clone()]
            }
            Head::Multi { children, .. } => children.iter().flat_map(Head::label_names).collect(),
        }
    }

    pub fn weight_columns(&self) -> Vec<String> {
        match self {
            Head::MultiClass { weight_column, .. }
            | Head::Binary { weight_column, .. }
            | Head::Regression { weight_column, .. } => weight_column.iter().cloned().collect(),
            Head::Multi { children, .. } => {
                children.iter().flat_map(Head::weight_columns).collect()
            }
        }
    }

    /// Width of the logits this head consumes.
    pub fn logits_dimension(&self) -> usize {
        match self {
            Head::MultiClass { n_classes, .. } => *n_classes,
            Head::Binary { .. } => 1,
            Head::Regression { label_dim, .. } => *label_dim,
            Head::Multi { children, .. } => children.iter().map(Head::logits_dimension).sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Head::MultiClass { n_classes, .. } if *n_classes < 2 => Err(Error::invalid(format!(
                "multi_class head needs n_classes >= 2, got {n_classes}"
            ))),
            Head::Regression { label_dim: 0, .. } => {
                Err(Error::invalid("regression label_dim must be at least 1"))
            }
            Head::Multi {
                children,
                loss_weights,
            } => {
                if children.is_empty() {
                    return Err(Error::invalid("multi head needs at least one child"));
                }
                if children.len() != loss_weights.len() {
                    return Err(Error::invalid(format!(
                        "multi head has {} children but {} loss weights",
                        children.len(),
                        loss_weights.len()
                    )));
                }
                let mut seen = BTreeSet::new();
                for c in children {
                    let Some(name) = c.head_name() else {
                        return Err(Error::invalid("multi heads cannot be nested"));
                    };
                    if !seen.insert(name) {
                        return Err(Error::invalid(format!("duplicate head_name {name}")));
                    }
                    c.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn logits(&self, g: &mut Graph, input: HeadInput) -> Result<NodeId> {
        let width = self.logits_dimension();
        let logits = match input {
            HeadInput::Logits(l) => l,
            HeadInput::LastLayer(h) => {
                let scope = self.head_name().unwrap_or(DEFAULT_HEAD).to_string();
                g.variable_scope(&scope, None, |g| {
                    Dense::new(width).name("logits").build(g, h)
                })?
            }
        };
        let shape = g.shape(logits);
        if shape.rank() != 2 || shape.dim(1).is_some_and(|d| d != width) {
            return Err(Error::invalid(format!(
                "head expects logits of shape [?, {width}], got {shape}"
            )));
        }
        Ok(logits)
    }

    fn build(
        &self,
        g: &mut Graph,
        features: &Features,
        labels: Option<&Labels>,
        mode: Mode,
        input: HeadInput,
        prefix: &str,
    ) -> Result<HeadOutput> {
        if let Head::Multi {
            children,
            loss_weights,
        } = self
        {
            return build_multi(g, features, labels, mode, input, children, loss_weights);
        }
        let logits = self.logits(g, input)?;
        let key = |s: &str| format!("{prefix}{s}");
        let mut predictions = BTreeMap::new();
        let (loss_kind, class_id) = match self {
            Head::MultiClass { .. } => {
                let probs = g.softmax(logits)?;
                let class_id = g.argmax(probs)?;
                predictions.insert(key("logits"), logits);
                predictions.insert(key("probabilities"), probs);
                predictions.insert(key("class_id"), class_id);
                (LossKind::SoftmaxCrossEntropy, Some(class_id))
            }
            Head::Binary { .. } => {
                let p = g.sigmoid(logits)?;
                let one = g.scalar(1.0);
                let q = g.sub(one, p)?;
                let probs = g.concat(&[q, p], 1)?;
                let class_id = g.argmax(probs)?;
                predictions.insert(key("logits"), logits);
                predictions.insert(key("logistic"), p);
                predictions.insert(key("probabilities"), probs);
                predictions.insert(key("class_id"), class_id);
                (LossKind::SigmoidCrossEntropy, Some(class_id))
            }
            Head::Regression { .. } => {
                predictions.insert(key("value"), logits);
                (LossKind::MeanSquaredError, None)
            }
            Head::Multi { .. } => unreachable!(),
        };
        let mut out = HeadOutput {
            predictions,
            loss: None,
            metrics: BTreeMap::new(),
        };
        if mode == Mode::Predict {
            return Ok(out);
        }
        let label_name = &self.label_names()[0];
        let labels = labels
            .ok_or_else(|| Error::MissingLabel(label_name.clone()))?
            .get(g, label_name)?;
        let weights = match self.weight_columns().first() {
            Some(col) => Some(features.dense(g, col)?),
            None => None,
        };
        let per_example = per_example_loss(g, loss_kind, logits, labels)?;
        let w = match weights {
            Some(w) => crate::layers::as_vector(g, w)?,
            None => g.scalar(1.0),
        };
        out.loss = Some(g.weighted_mean(per_example, w)?);
        if mode == Mode::Eval {
            if let Some(class_id) = class_id {
                let acc = metric(
                    g,
                    MetricKind::Accuracy,
                    &key("accuracy"),
                    Some(labels),
                    class_id,
                    weights,
                )?;
                out.metrics.insert(key("accuracy"), acc);
            }
            let avg = metric(
                g,
                MetricKind::AverageLoss,
                &key("average_loss"),
                None,
                per_example,
                weights,
            )?;
            out.metrics.insert(key("average_loss"), avg);
        }
        Ok(out)
    }
}

fn build_multi(
    g: &mut Graph,
    features: &Features,
    labels: Option<&Labels>,
    mode: Mode,
    input: HeadInput,
    children: &[Head],
    loss_weights: &[f64],
) -> Result<HeadOutput> {
    let mut out = HeadOutput {
        predictions: BTreeMap::new(),
        loss: None,
        metrics: BTreeMap::new(),
    };
    let mut offset = 0;
    for (child, &w) in children.iter().zip(loss_weights) {
        let width = child.logits_dimension();
        let child_input = match input {
            HeadInput::Logits(l) => HeadInput::Logits(g.slice(l, 1, offset, width)?),
            last @ HeadInput::LastLayer(_) => last,
        };
        offset += width;
        let prefix = format!("{}/", child.head_name().expect("validated"));
        let part = child.build(g, features, labels, mode, child_input, &prefix)?;
        out.predictions.extend(part.predictions);
        out.metrics.extend(part.metrics);
        if let Some(l) = part.loss {
            let weighted = g.scale(l, w)?;
            out.loss = Some(match out.loss {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
        }
    }
    if let HeadInput::Logits(l) = input {
        if g.shape(l).dim(1).is_some_and(|d| d != offset) {
            return Err(Error::invalid(format!(
                "multi head expects logits of width {offset}, got {}",
                g.shape(l)
            )));
        }
    }
    Ok(out)
}

/// Builds a mode-correct spec from the head. `train_op_fn` is required in
/// TRAIN and receives the total loss.
pub fn create_estimator_spec(
    head: &Head,
    g: &mut Graph,
    features: &Features,
    labels: Option<&Labels>,
    mode: Mode,
    input: HeadInput,
    train_op_fn: Option<TrainOpFn<'_>>,
) -> Result<EstimatorSpec> {
    head.validate()?;
    if mode == Mode::Train && train_op_fn.is_none() {
        return Err(Error::InvalidSpec(
            "TRAIN mode requires a train_op_fn".into(),
        ));
    }
    let out = head.build(g, features, labels, mode, input, "")?;
    let mut spec = EstimatorSpec::new(mode);
    spec.predictions = out.predictions;
    spec.signature_from_predictions(g);
    match mode {
        Mode::Predict => {}
        Mode::Eval => {
            spec.loss = out.loss;
            spec.eval_metrics = out.metrics;
        }
        Mode::Train => {
            let loss = out.loss.expect("non-predict heads produce a loss");
            spec.loss = Some(loss);
            spec.train_op = Some((train_op_fn.expect("checked"))(g, loss)?);
        }
    }
    Ok(spec)
}
