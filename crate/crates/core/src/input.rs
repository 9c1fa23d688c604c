//! Raw input data: examples, batches and input functions.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, StaticShape};
use crate::tensor::Tensor;

/// One raw feature value of one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureValue {
    Dense(Vec<f64>),
    /// Possibly empty (missing) or multi-valued.
    Categorical(Vec<String>),
    Integral(Vec<i64>),
}

impl FeatureValue {
    pub fn category(s: &str) -> Self {
        FeatureValue::Categorical(vec![s.to_string()])
    }

    /// String form used for hashing.
    pub fn strings(&self) -> Vec<String> {
        match self {
            FeatureValue::Categorical(v) => v.clone(),
            FeatureValue::Integral(v) => v.iter().map(i64::to_string).collect(),
            FeatureValue::Dense(v) => v.iter().map(|x| format_number(*x)).collect(),
        }
    }
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: BTreeMap<String, FeatureValue>,
}

impl Example {
    pub fn new() -> Self {
        Example::default()
    }

    pub fn with(mut self, name: &str, value: FeatureValue) -> Self {
        self.features.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Result<&FeatureValue> {
        self.features
            .get(name)
            .ok_or_else(|| Error::MissingFeature(name.to_string()))
    }
}

/// One feature across a batch: a dense tensor whose first dimension is the
/// batch, or one raw value per example.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureBatch {
    Dense(Tensor),
    Values(Vec<FeatureValue>),
}

impl FeatureBatch {
    pub fn batch_size(&self) -> usize {
        match self {
            FeatureBatch::Dense(t) => t.batch_size(),
            FeatureBatch::Values(v) => v.len(),
        }
    }

    /// Dense `[batch, dim]` view; fails when any example has another width.
    pub fn to_dense(&self, name: &str, dim: usize) -> Result<Tensor> {
        match self {
            FeatureBatch::Dense(t) => {
                let b = t.batch_size();
                if t.rank() == 0 || t.numel() != b * dim {
                    return Err(Error::invalid(format!(
                        "feature {name}: expected {dim} values per example, got shape {}",
                        t.shape()
                    )));
                }
                t.clone().reshape(vec![b, dim])
            }
            FeatureBatch::Values(values) => {
                let mut data = Vec::with_capacity(values.len() * dim);
                for v in values {
                    let row: Vec<f64> = match v {
                        FeatureValue::Dense(d) => d.clone(),
                        FeatureValue::Integral(d) => d.iter().map(|&x| x as f64).collect(),
                        FeatureValue::Categorical(_) => {
                            return Err(Error::invalid(format!(
                                "feature {name} is categorical, expected {dim} numeric values"
                            )))
                        }
                    };
                    if row.len() != dim {
                        return Err(Error::invalid(format!(
                            "feature {name}: expected {dim} values per example, got {}",
                            row.len()
                        )));
                    }
                    data.extend(row);
                }
                Tensor::new(vec![values.len(), dim], data)
            }
        }
    }

    /// Per-example string values for hashing.
    pub fn strings(&self) -> Vec<Vec<String>> {
        match self {
            FeatureBatch::Values(values) => values.iter().map(FeatureValue::strings).collect(),
            FeatureBatch::Dense(t) => {
                let b = t.batch_size();
                let width = if b == 0 { 0 } else { t.numel() / b };
                t.data()
                    .chunks(width.max(1))
                    .take(b)
                    .map(|row| row.iter().map(|&x| format_number(x)).collect())
                    .collect()
            }
        }
    }

    pub fn select(&self, rows: &[usize]) -> Result<FeatureBatch> {
        Ok(match self {
            FeatureBatch::Dense(t) => FeatureBatch::Dense(select_rows(t, rows)?),
            FeatureBatch::Values(v) => {
                FeatureBatch::Values(rows.iter().map(|&i| v[i].clone()).collect())
            }
        })
    }

    fn kind(&self) -> FeatureKind {
        match self {
            FeatureBatch::Dense(t) => FeatureKind::Dense {
                dims: t.dims().get(1..).unwrap_or(&[]).to_vec(),
            },
            FeatureBatch::Values(values) => {
                let widths: Vec<Option<usize>> = values
                    .iter()
                    .map(|v| match v {
                        FeatureValue::Dense(d) => Some(d.len()),
                        _ => None,
                    })
                    .collect();
                match widths.first() {
                    Some(Some(w)) if widths.iter().all(|x| *x == Some(*w)) => {
                        FeatureKind::Dense { dims: vec![*w] }
                    }
                    _ => FeatureKind::Sparse,
                }
            }
        }
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let parts = rows.iter().map(|&i| t.row(i)).collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        let mut dims = t.dims().to_vec();
        dims[0] = 0;
        return Ok(Tensor::zeros(dims));
    }
    Tensor::stack(&parts)
}

/// Features and labels for one minibatch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputBatch {
    pub features: BTreeMap<String, FeatureBatch>,
    pub labels: BTreeMap<String, Tensor>,
}

impl InputBatch {
    pub fn new() -> Self {
        InputBatch::default()
    }

    pub fn with_feature(mut self, name: &str, value: FeatureBatch) -> Self {
        self.features.insert(name.to_string(), value);
        self
    }

    pub fn with_dense(self, name: &str, value: Tensor) -> Self {
        self.with_feature(name, FeatureBatch::Dense(value))
    }

    pub fn with_label(mut self, name: &str, value: Tensor) -> Self {
        self.labels.insert(name.to_string(), value);
        self
    }

    /// Batches examples; every example must carry the same feature names.
    pub fn from_examples(examples: &[Example]) -> Result<InputBatch> {
        let mut features: BTreeMap<String, Vec<FeatureValue>> = BTreeMap::new();
        if let Some(first) = examples.first() {
            for name in first.features.keys() {
                features.insert(name.clone(), Vec::with_capacity(examples.len()));
            }
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != features.len() {
                return Err(Error::invalid(format!(
                    "example {i} has a different feature set than example 0"
                )));
            }
            for (name, v) in &ex.features {
                features
                    .get_mut(name)
                    .ok_or_else(|| Error::invalid(format!("example {i} has extra feature {name}")))?
                    .push(v.clone());
            }
        }
        Ok(InputBatch {
            features: features
                .into_iter()
                .map(|(k, v)| (k, FeatureBatch::Values(v)))
                .collect(),
            labels: BTreeMap::new(),
        })
    }

    pub fn feature(&self, name: &str) -> Result<&FeatureBatch> {
        self.features
            .get(name)
            .ok_or_else(|| Error::MissingFeature(name.to_string()))
    }

    pub fn batch_size(&self) -> usize {
        self.features
            .values()
            .map(FeatureBatch::batch_size)
            .chain(self.labels.values().map(Tensor::batch_size))
            .next()
            .unwrap_or(0)
    }

    fn check_consistent(&self) -> Result<usize> {
        let n = self.batch_size();
        for (name, f) in &self.features {
            if f.batch_size() != n {
                return Err(Error::invalid(format!(
                    "feature {name} has {} rows, expected {n}",
                    f.batch_size()
                )));
            }
        }
        for (name, l) in &self.labels {
            if l.batch_size() != n || l.rank() == 0 {
                return Err(Error::invalid(format!(
                    "label {name} has shape {}, expected {n} rows",
                    l.shape()
                )));
            }
        }
        Ok(n)
    }

    pub fn select(&self, rows: &[usize]) -> Result<InputBatch> {
        Ok(InputBatch {
            features: self
                .features
                .iter()
                .map(|(k, v)| Ok((k.clone(), v.select(rows)?)))
                .collect::<Result<_>>()?,
            labels: self
                .labels
                .iter()
                .map(|(k, v)| Ok((k.clone(), select_rows(v, rows)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn signature(&self) -> InputSignature {
        InputSignature {
            features: self
                .features
                .iter()
                .map(|(k, v)| (k.clone(), v.kind()))
                .collect(),
            labels: self
                .labels
                .iter()
                .map(|(k, v)| (k.clone(), v.dims().get(1..).unwrap_or(&[]).to_vec()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// Fixed per-example dims after the batch dimension.
    Dense { dims: Vec<usize> },
    /// Variable-length raw values.
    Sparse,
}

/// Names and per-example shapes of what an input function produces.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSignature {
    pub features: BTreeMap<String, FeatureKind>,
    #[serde(default)]
    pub labels: BTreeMap<String, Vec<usize>>,
}

pub type BatchIter = Box<dyn Iterator<Item = Result<InputBatch>> + Send>;

/// Callback producing a fresh batch iterator from the start of the data.
#[derive(Clone)]
pub struct InputFn(Arc<dyn Fn() -> Result<BatchIter> + Send + Sync>);

impl InputFn {
    pub fn new(f: impl Fn() -> Result<BatchIter> + Send + Sync + 'static) -> Self {
        InputFn(Arc::new(f))
    }

    pub fn call(&self) -> Result<BatchIter> {
        (self.0)()
    }

    /// Minibatches over an in-memory dataset. `num_epochs = None` repeats
    /// forever; `shuffle_seed` reshuffles each epoch deterministically.
    pub fn from_batch(
        data: InputBatch,
        batch_size: usize,
        num_epochs: Option<usize>,
        shuffle_seed: Option<u64>,
    ) -> Result<InputFn> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        data.check_consistent()?;
        let data = Arc::new(data);
        Ok(InputFn::new(move || {
            let data = Arc::clone(&data);
            let n = data.batch_size();
            let mut epoch = 0usize;
            let mut order: Vec<usize> = Vec::new();
            let mut pos = 0usize;
            let iter = std::iter::from_fn(move || {
                if n == 0 {
                    return None;
                }
                if pos >= order.len() {
                    if num_epochs.is_some_and(|e| epoch >= e) {
                        return None;
                    }
                    order = (0..n).collect();
                    if let Some(seed) = shuffle_seed {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(crate::hashing::mix(seed, epoch as u64));
                        order.shuffle(&mut rng);
                    }
                    epoch += 1;
                    pos = 0;
                }
                let end = (pos + batch_size).min(order.len());
                let rows = order[pos..end].to_vec();
                pos = end;
                Some(data.select(&rows))
            });
            Ok(Box::new(iter) as BatchIter)
        }))
    }

    /// Every `k`-th batch starting at `index`: a disjoint stride of the stream.
    pub fn shard(&self, k: usize, index: usize) -> InputFn {
        let inner = self.clone();
        InputFn::new(move || {
            let it = inner.call()?;
            Ok(Box::new(it.skip(index).step_by(k.max(1))) as BatchIter)
        })
    }
}

/// Graph-side view of the features an input function provides.
pub struct Features {
    signature: BTreeMap<String, FeatureKind>,
    dense_nodes: RefCell<HashMap<String, NodeId>>,
}

impl Features {
    pub fn new(signature: BTreeMap<String, FeatureKind>) -> Self {
        Features {
            signature,
            dense_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn signature(&self) -> &BTreeMap<String, FeatureKind> {
        &self.signature
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.signature.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.signature.contains_key(name)
    }

    pub fn kind(&self, name: &str) -> Result<&FeatureKind> {
        self.signature
            .get(name)
            .ok_or_else(|| Error::MissingFeature(name.to_string()))
    }

    /// Input node of a dense feature, shaped `[batch, dims...]`.
    pub fn dense(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&n) = self.dense_nodes.borrow().get(name) {
            return Ok(n);
        }
        let FeatureKind::Dense { dims } = self.kind(name)? else {
            return Err(Error::invalid(format!("feature {name} is not dense")));
        };
        let dims = dims.clone();
        let width: usize = dims.iter().product();
        let owned = name.to_string();
        let full = dims.clone();
        let node = g.feature_input(
            name,
            StaticShape::batched(&dims),
            Arc::new(move |batch: &InputBatch| {
                let flat = batch.feature(&owned)?.to_dense(&owned, width)?;
                let b = flat.batch_size();
                let mut shape = vec![b];
                shape.extend_from_slice(&full);
                flat.reshape(shape)
            }),
        );
        self.dense_nodes.borrow_mut().insert(name.to_string(), node);
        Ok(node)
    }
}

/// Graph-side view of the labels an input function provides.
pub struct Labels {
    signature: BTreeMap<String, Vec<usize>>,
    nodes: RefCell<HashMap<String, NodeId>>,
}

impl Labels {
    pub fn new(signature: BTreeMap<String, Vec<usize>>) -> Self {
        Labels {
            signature,
            nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.signature.contains_key(name)
    }

    pub fn dims(&self, name: &str) -> Result<&[usize]> {
        self.signature
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingLabel(name.to_string()))
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&n) = self.nodes.borrow().get(name) {
            return Ok(n);
        }
        let dims = self.dims(name)?.to_vec();
        let node = g.label_input(name, StaticShape::batched(&dims));
        self.nodes.borrow_mut().insert(name.to_string(), node);
        Ok(node)
    }
}
