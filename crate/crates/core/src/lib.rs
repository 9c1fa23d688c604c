//! An Estimator-style training framework: a small dataflow graph with
//! reverse-mode differentiation, layers, feature columns, heads, a
//! train/evaluate/predict/export harness with hooks, canned models, and a
//! simulated parameter-server cluster.

pub mod canned;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod feature_columns;
pub mod graph;
pub mod hashing;
pub mod heads;
pub mod hooks;
pub mod input;
pub mod layers;
pub mod model_fn;
pub mod optimizer;
pub mod tensor;

pub use canned::{CannedConfig, EstimatorType};
pub use error::{Error, Result};
pub use estimator::{Estimator, RunConfig, ServingInputSpec, ServingModel};
pub use experiment::{train_and_evaluate, ClusterSpec, Experiment, FaultPlan};
pub use feature_columns::FeatureColumn;
pub use graph::{ExecutionContext, Graph, NodeId};
pub use heads::Head;
pub use hooks::Hook;
pub use input::{Example, FeatureBatch, FeatureValue, InputBatch, InputFn};
pub use model_fn::{EstimatorSpec, Mode, ModelFn, Params};
pub use optimizer::Optimizer;
pub use tensor::{Shape, Tensor};
