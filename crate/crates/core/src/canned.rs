//! Prebuilt estimators. Each one is an ordinary [`Estimator`] whose model
//! function is assembled from a [`CannedConfig`]; nothing else is overridden.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Estimator, ModelDescriptor, RunConfig};
use crate::feature_columns::{input_layer, linear_model, FeatureColumn};
use crate::graph::{Graph, NodeId, VarId};
use crate::heads::{create_estimator_spec, Head, HeadInput, DEFAULT_LABEL};
use crate::layers::{dropout, Activation, Dense};
use crate::model_fn::{Mode, ModelFn, Params};
use crate::optimizer::Optimizer;

pub const LINEAR_SCOPE: &str = "linear";
pub const DNN_SCOPE: &str = "dnn";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorType {
    LinearClassifier,
    LinearRegressor,
    DnnClassifier,
    DnnRegressor,
    DnnLinearCombinedClassifier,
}

impl EstimatorType {
    pub const ALL: [EstimatorType; 5] = [
        EstimatorType::LinearClassifier,
        EstimatorType::LinearRegressor,
        EstimatorType::DnnClassifier,
        EstimatorType::DnnRegressor,
        EstimatorType::DnnLinearCombinedClassifier,
    ];

    pub fn is_classifier(self) -> bool {
        matches!(
            self,
            EstimatorType::LinearClassifier
                | EstimatorType::DnnClassifier
                | EstimatorType::DnnLinearCombinedClassifier
        )
    }

    fn has_linear(self) -> bool {
        matches!(
            self,
            EstimatorType::LinearClassifier
                | EstimatorType::LinearRegressor
                | EstimatorType::DnnLinearCombinedClassifier
        )
    }

    fn has_dnn(self) -> bool {
        matches!(
            self,
            EstimatorType::DnnClassifier
                | EstimatorType::DnnRegressor
                | EstimatorType::DnnLinearCombinedClassifier
        )
    }
}

impl fmt::Display for EstimatorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

fn default_n_classes() -> usize {
    2
}

fn default_one() -> usize {
    1
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_label() -> String {
    DEFAULT_LABEL.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannedConfig {
    #[serde(default)]
    pub linear_columns: Vec<FeatureColumn>,
    #[serde(default)]
    pub dnn_columns: Vec<FeatureColumn>,
    #[serde(default)]
    pub hidden_units: Vec<usize>,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_one")]
    pub label_dimension: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    /// Defaults to Adagrad with learning rate 0.05.
    #[serde(default)]
    pub linear_optimizer: Option<Optimizer>,
    /// Defaults to SGD with learning rate 0.05.
    #[serde(default)]
    pub dnn_optimizer: Option<Optimizer>,
    #[serde(default = "default_label")]
    pub label_name: String,
    #[serde(default)]
    pub weight_column: Option<String>,
}

impl Default for CannedConfig {
    fn default() -> Self {
        CannedConfig {
            linear_columns: Vec::new(),
            dnn_columns: Vec::new(),
            hidden_units: Vec::new(),
            n_classes: default_n_classes(),
            label_dimension: 1,
            activation: default_activation(),
            dropout: 0.0,
            linear_optimizer: None,
            dnn_optimizer: None,
            label_name: default_label(),
            weight_column: None,
        }
    }
}

pub fn default_linear_optimizer() -> Optimizer {
    Optimizer::adagrad(0.05)
}

pub fn default_dnn_optimizer() -> Optimizer {
    Optimizer::sgd(0.05)
}

impl CannedConfig {
    pub fn linear(columns: Vec<FeatureColumn>) -> Self {
        CannedConfig {
            linear_columns: columns,
            ..CannedConfig::default()
        }
    }

    pub fn dnn(hidden_units: Vec<usize>, columns: Vec<FeatureColumn>) -> Self {
        CannedConfig {
            dnn_columns: columns,
            hidden_units,
            ..CannedConfig::default()
        }
    }

    pub fn combined(
        linear: Vec<FeatureColumn>,
        dnn: Vec<FeatureColumn>,
        hidden_units: Vec<usize>,
    ) -> Self {
        CannedConfig {
            linear_columns: linear,
            dnn_columns: dnn,
            hidden_units,
            ..CannedConfig::default()
        }
    }

    pub fn with_n_classes(mut self, n: usize) -> Self {
        self.n_classes = n;
        self
    }

    pub fn with_linear_optimizer(mut self, opt: Optimizer) -> Self {
        self.linear_optimizer = Some(opt);
        self
    }

    pub fn with_dnn_optimizer(mut self, opt: Optimizer) -> Self {
        self.dnn_optimizer = Some(opt);
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn validate(&self, kind: EstimatorType) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{kind}: {msg}")));
        if kind.has_linear() {
            if self.linear_columns.is_empty() {
                return bad("linear_columns must not be empty".into());
            }
            for c in &self.linear_columns {
                if matches!(
                    c,
                    FeatureColumn::Embedding { .. } | FeatureColumn::SharedEmbedding { .. }
                ) {
                    return bad(format!(
                        "embedding column {} is not allowed on the linear path",
                        c.name()
                    ));
                }
                c.validate().or_else(|e| bad(e.to_string()))?;
            }
        }
        if kind.has_dnn() {
            if self.dnn_columns.is_empty() {
                return bad("dnn_columns must not be empty".into());
            }
            if self.hidden_units.is_empty() || self.hidden_units.contains(&0) {
                return bad("hidden_units must be a non-empty list of positive sizes".into());
            }
            for c in &self.dnn_columns {
                c.validate().or_else(|e| bad(e.to_string()))?;
                if let Err(e) = c.output_dim() {
                    return bad(e.to_string());
                }
            }
        }
        if kind.is_classifier() && self.n_classes < 2 {
            return bad(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if !kind.is_classifier() && self.label_dimension == 0 {
            return bad("label_dimension must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head(&self, kind: EstimatorType) -> Head {
        let head = if kind.is_classifier() {
            Head::multi_class(self.n_classes)
        } else {
            Head::regression(self.label_dimension)
        };
        let head = head.with_label(&self.label_name);
        match &self.weight_column {
            Some(w) => head.with_weight_column(w),
            None => head,
        }
    }
}

fn vars_in_scope(g: &Graph, scope: &str) -> Vec<VarId> {
    let prefix = format!("{scope}/");
    g.trainable_variables()
        .into_iter()
        .filter(|&v| g.var_def(v).name.starts_with(&prefix))
        .collect()
}

fn dnn_tower(
    g: &mut Graph,
    cfg: &CannedConfig,
    features: &crate::input::Features,
    mode: Mode,
    width: usize,
) -> Result<NodeId> {
    g.variable_scope(DNN_SCOPE, None, |g| {
        let mut x = input_layer(g, features, &cfg.dnn_columns)?;
        for (i, &units) in cfg.hidden_units.iter().enumerate() {
            x = Dense::new(units)
                .activation(cfg.activation)
                .name(&format!("hiddenlayer_{i}"))
                .build(g, x)?;
            if cfg.dropout > 0.0 {
                x = dropout(g, x, cfg.dropout, mode)?;
            }
        }
        Dense::new(width).name("logits").build(g, x)
    })
}

/// The model function shared by every canned estimator type.
pub fn canned_model_fn(kind: EstimatorType, cfg: CannedConfig) -> Result<ModelFn> {
    cfg.validate(kind)?;
    let cfg = Arc::new(cfg);
    Ok(Arc::new(
        move |g: &mut Graph, features, labels, mode, _params: &Params| {
            let head = cfg.head(kind);
            let width = head.logits_dimension();
            let linear = if kind.has_linear() {
                Some(linear_model(g, features, &cfg.linear_columns, width)?)
            } else {
                None
            };
            let deep = if kind.has_dnn() {
                Some(dnn_tower(g, &cfg, features, mode, width)?)
            } else {
                None
            };
            let logits = match (linear, deep) {
                (Some(l), Some(d)) => g.add(l, d)?,
                (Some(l), None) => l,
                (None, Some(d)) => d,
                (None, None) => unreachable!("validated"),
            };
            let train_op_fn = |g: &mut Graph, loss: NodeId| -> Result<NodeId> {
                let mut ops = Vec::new();
                let towers = [
                    (
                        kind.has_linear(),
                        LINEAR_SCOPE,
                        cfg.linear_optimizer
                            .clone()
                            .unwrap_or_else(default_linear_optimizer),
                    ),
                    (
                        kind.has_dnn(),
                        DNN_SCOPE,
                        cfg.dnn_optimizer
                            .clone()
                            .unwrap_or_else(default_dnn_optimizer),
                    ),
                ];
                for (present, scope, opt) in towers {
                    if present {
                        let vars = vars_in_scope(g, scope);
                        ops.push(opt.minimize_vars(g, loss, &vars, ops.is_empty())?);
                    }
                }
                if ops.len() == 1 {
                    Ok(ops[0])
                } else {
                    g.group(&ops)
                }
            };
            create_estimator_spec(
                &head,
                g,
                features,
                labels,
                mode,
                HeadInput::Logits(logits),
                Some(&train_op_fn),
            )
        },
    ))
}

/// Any canned estimator by type.
pub fn canned_estimator(
    kind: EstimatorType,
    cfg: CannedConfig,
    run: RunConfig,
) -> Result<Estimator> {
    let descriptor = ModelDescriptor {
        kind: kind.to_string(),
        config: serde_json::to_value(&cfg)?,
    };
    let model_fn = canned_model_fn(kind, cfg)?;
    Ok(Estimator::new(model_fn, Params::new(), run)?.with_descriptor(descriptor))
}

pub fn linear_classifier(cfg: CannedConfig, run: RunConfig) -> Result<Estimator> {
    canned_estimator(EstimatorType::LinearClassifier, cfg, run)
}

pub fn linear_regressor(cfg: CannedConfig, run: RunConfig) -> Result<Estimator> {
    canned_estimator(EstimatorType::LinearRegressor, cfg, run)
}

pub fn dnn_classifier(cfg: CannedConfig, run: RunConfig) -> Result<Estimator> {
    canned_estimator(EstimatorType::DnnClassifier, cfg, run)
}

pub fn dnn_regressor(cfg: CannedConfig, run: RunConfig) -> Result<Estimator> {
    canned_estimator(EstimatorType::DnnRegressor, cfg, run)
}

pub fn dnn_linear_combined_classifier(cfg: CannedConfig, run: RunConfig) -> Result<Estimator> {
    canned_estimator(EstimatorType::DnnLinearCombinedClassifier, cfg, run)
}

/// Rebuilds a canned model function from an export's model description.
pub fn model_fn_from_descriptor(desc: &ModelDescriptor) -> Result<ModelFn> {
    let kind: EstimatorType = serde_json::from_value(serde_json::Value::String(desc.kind.clone()))
        .map_err(|_| Error::Config(format!("unknown model kind {}", desc.kind)))?;
    let cfg: CannedConfig = serde_json::from_value(desc.config.clone())?;
    canned_model_fn(kind, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_columns::{embedding, hashed, numeric};
    use crate::input::{FeatureKind, InputSignature};

    fn signature(names: &[(&str, FeatureKind)]) -> InputSignature {
        InputSignature {
            features: names
                .iter()
                .map(|(n, k)| (n.to_string(), k.clone()))
                .collect(),
            labels: [("label".to_string(), Vec::new())].into(),
        }
    }

    #[test]
    fn hidden_unit_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CannedConfig::dnn(vec![500, 200, 100], vec![numeric("x", 3)]).with_n_classes(4);
        let est = dnn_classifier(cfg, RunConfig::new(dir.path())).unwrap();
        let sig = signature(&[("x", FeatureKind::Dense { dims: vec![3] })]);
        let (g, _) = est.build_graph(Mode::Train, &sig).unwrap();
        let shape = |n: &str| {
            g.var_def(g.variable_by_name(n).unwrap())
                .shape
                .dims()
                .to_vec()
        };
        assert_eq!(shape("dnn/hiddenlayer_0/kernel"), vec![3, 500]);
        assert_eq!(shape("dnn/hiddenlayer_1/kernel"), vec![500, 200]);
        assert_eq!(shape("dnn/hiddenlayer_2/kernel"), vec![200, 100]);
        assert_eq!(shape("dnn/logits/kernel"), vec![100, 4]);
        assert_eq!(shape("dnn/logits/bias"), vec![4]);
    }

    #[test]
    fn constructor_validation() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunConfig::new(dir.path());
        assert!(linear_classifier(
            CannedConfig::linear(vec![embedding(hashed("q", 10), 2)]),
            run.clone()
        )
        .is_err());
        assert!(dnn_classifier(
            CannedConfig::dnn(vec![], vec![numeric("x", 1)]),
            run.clone()
        )
        .is_err());
        assert!(dnn_classifier(
            CannedConfig::dnn(vec![4], vec![numeric("x", 1)]).with_n_classes(1),
            run.clone()
        )
        .is_err());
        assert!(dnn_linear_combined_classifier(
            CannedConfig::combined(vec![], vec![numeric("x", 1)], vec![2]),
            run
        )
        .is_err());
    }

    #[test]
    fn combined_uses_one_step_increment() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CannedConfig::combined(
            vec![hashed("q", 10)]
                .into_iter()
                .map(crate::feature_columns::indicator)
                .collect(),
            vec![embedding(hashed("q", 10), 4)],
            vec![3],
        );
        let est = dnn_linear_combined_classifier(cfg, RunConfig::new(dir.path())).unwrap();
        let sig = signature(&[("q", FeatureKind::Sparse)]);
        let (g, spec) = est.build_graph(Mode::Train, &sig).unwrap();
        let updates = g.updates_of(spec.train_op.unwrap());
        assert_eq!(updates.iter().filter(|(_, inc)| *inc).count(), 1);
        let has_slot = updates.iter().any(|(u, _)| u.slot.is_some());
        assert!(has_slot, "linear tower defaults to adagrad");
    }

    #[test]
    fn descriptor_roundtrip() {
        let cfg = CannedConfig::dnn(vec![4], vec![numeric("x", 2)]);
        let desc = ModelDescriptor {
            kind: EstimatorType::DnnRegressor.to_string(),
            config: serde_json::to_value(&cfg).unwrap(),
        };
        assert_eq!(desc.kind, "dnn_regressor");
        model_fn_from_descriptor(&desc).unwrap();
    }
}
