//! Declarative feature columns compiled into dense model inputs.
//!
//! Categorical values are hashed with 64-bit FNV-1a over their UTF-8 bytes
//! and reduced modulo the bucket count. Crossed values are joined with the
//! 0x1F byte before hashing. Missing (empty) categorical values produce zero
//! blocks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Collection, Combiner, Graph, Initializer, NodeId, Reuse, StaticShape};
use crate::hashing::fnv1a64;
use crate::input::{Features, InputBatch};
use crate::tensor::Tensor;

pub const CROSS_SEPARATOR: char = '\u{1F}';

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureColumn {
    Numeric {
        name: String,
        #[serde(default = "one")]
        dim: usize,
    },
    Bucketized {
        source: Box<FeatureColumn>,
        boundaries: Vec<f64>,
    },
    Hashed {
        name: String,
        num_buckets: usize,
    },
    Crossed {
        names: Vec<String>,
        num_buckets: usize,
    },
    Indicator {
        categorical: Box<FeatureColumn>,
    },
    Embedding {
        categorical: Box<FeatureColumn>,
        dimension: usize,
        #[serde(default)]
        combiner: Combiner,
    },
    SharedEmbedding {
        categorical: Vec<FeatureColumn>,
        dimension: usize,
        shared_name: String,
        #[serde(default)]
        combiner: Combiner,
    },
}

fn one() -> usize {
    1
}

pub fn hash_bucket(value: &str, num_buckets: usize) -> usize {
    (fnv1a64(value.as_bytes()) % num_buckets.max(1) as u64) as usize
}

/// Bucket ids of the Cartesian product of the parents' values.
pub fn cross(parents: &[Vec<String>], num_buckets: usize) -> Vec<usize> {
    let mut combos: Vec<String> = vec![String::new()];
    for (i, values) in parents.iter().enumerate() {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for prefix in &combos {
            for v in values {
                let mut s = prefix.clone();
                if i > 0 {
                    s.push(CROSS_SEPARATOR);
                }
                s.push_str(v);
                next.push(s);
            }
        }
        combos = next;
    }
    if parents.is_empty() {
        return Vec::new();
    }
    combos.iter().map(|c| hash_bucket(c, num_buckets)).collect()
}

/// Index of the bucket `x` falls into: bucket i covers [b[i-1], b[i]).
fn bucketize(x: f64, boundaries: &[f64]) -> usize {
    boundaries.partition_point(|&b| b <= x)
}

pub fn numeric(name: &str, dim: usize) -> FeatureColumn {
    FeatureColumn::Numeric {
        name: name.to_string(),
        dim,
    }
}

pub fn hashed(name: &str, num_buckets: usize) -> FeatureColumn {
    FeatureColumn::Hashed {
        name: name.to_string(),
        num_buckets,
    }
}

pub fn crossed(names: &[&str], num_buckets: usize) -> FeatureColumn {
    FeatureColumn::Crossed {
        names: names.iter().map(|s| s.to_string()).collect(),
        num_buckets,
    }
}

pub fn bucketized(source: FeatureColumn, boundaries: Vec<f64>) -> FeatureColumn {
    FeatureColumn::Bucketized {
        source: Box::new(source),
        boundaries,
    }
}

pub fn indicator(categorical: FeatureColumn) -> FeatureColumn {
    FeatureColumn::Indicator {
        categorical: Box::new(categorical),
    }
}

pub fn embedding(categorical: FeatureColumn, dimension: usize) -> FeatureColumn {
    FeatureColumn::Embedding {
        categorical: Box::new(categorical),
        dimension,
        combiner: Combiner::Mean,
    }
}

pub fn shared_embedding(
    categorical: Vec<FeatureColumn>,
    dimension: usize,
    shared_name: &str,
) -> FeatureColumn {
    FeatureColumn::SharedEmbedding {
        categorical,
        dimension,
        shared_name: shared_name.to_string(),
        combiner: Combiner::Mean,
    }
}

impl FeatureColumn {
    /// Name used for variables and diagnostics.
    pub fn name(&self) -> String {
        match self {
            FeatureColumn::Numeric { name, .. } | FeatureColumn::Hashed { name, .. } => {
                name.clone()
            }
            FeatureColumn::Bucketized { source, .. } => format!("{}_bucketized", source.name()),
            FeatureColumn::Crossed { names, .. } => names.join("_X_"),
            FeatureColumn::Indicator { categorical } => format!("{}_indicator", categorical.name()),
            FeatureColumn::Embedding { categorical, .. } => {
                format!("{}_embedding", categorical.name())
            }
            FeatureColumn::SharedEmbedding { shared_name, .. } => shared_name.clone(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(
            self,
            FeatureColumn::Bucketized { .. }
                | FeatureColumn::Hashed { .. }
                | FeatureColumn::Crossed { .. }
        )
    }

    /// Size of the id space of a categorical column.
    pub fn num_buckets(&self) -> Option<usize> {
        match self {
            FeatureColumn::Hashed { num_buckets, .. }
            | FeatureColumn::Crossed { num_buckets, .. } => Some(*num_buckets),
            FeatureColumn::Bucketized { source, boundaries } => match source.as_ref() {
                FeatureColumn::Numeric { dim, .. } => Some(dim * (boundaries.len() + 1)),
                _ => None,
            },
            _ => None,
        }
    }

    /// Raw feature names this column reads.
    pub fn source_features(&self) -> Vec<String> {
        match self {
            FeatureColumn::Numeric { name, .. } | FeatureColumn::Hashed { name, .. } => {
                vec![name.clone()]
            }
            FeatureColumn::Crossed { names, .. } => names.clone(),
            FeatureColumn::Bucketized { source, .. } => source.source_features(),
            FeatureColumn::Indicator { categorical }
            | FeatureColumn::Embedding { categorical, .. } => categorical.source_features(),
            FeatureColumn::SharedEmbedding { categorical, .. } => categorical
                .iter()
                .flat_map(FeatureColumn::source_features)
                .collect(),
        }
    }

    /// Raw features that must be parsed as numbers.
    pub fn numeric_features(&self) -> Vec<String> {
        match self {
            FeatureColumn::Numeric { name, .. } => vec![name.clone()],
            FeatureColumn::Bucketized { source, .. } => source.numeric_features(),
            FeatureColumn::Indicator { categorical }
            | FeatureColumn::Embedding { categorical, .. } => categorical.numeric_features(),
            FeatureColumn::SharedEmbedding { categorical, .. } => categorical
                .iter()
                .flat_map(FeatureColumn::numeric_features)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("column {}: {msg}", self.name())));
        match self {
            FeatureColumn::Numeric { dim, .. } if *dim == 0 => bad("dim must be at least 1".into()),
            FeatureColumn::Numeric { .. } => Ok(()),
            FeatureColumn::Bucketized { source, boundaries } => {
                if !matches!(source.as_ref(), FeatureColumn::Numeric { .. }) {
                    return bad("bucketized source must be a numeric column".into());
                }
                source.validate()?;
                if boundaries.is_empty() {
                    return bad("boundaries must not be empty".into());
                }
                if boundaries.windows(2).any(|w| !(w[0] < w[1]))
                    || boundaries.iter().any(|b| !b.is_finite())
                {
                    return bad("boundaries must be finite and strictly increasing".into());
                }
                Ok(())
            }
            FeatureColumn::Hashed { num_buckets, .. }
            | FeatureColumn::Crossed { num_buckets, .. }
                if *num_buckets == 0 =>
            {
                bad("num_buckets must be at least 1".into())
            }
            FeatureColumn::Hashed { .. } => Ok(()),
            FeatureColumn::Crossed { names, .. } => {
                if names.len() < 2 {
                    return bad("a cross needs at least two parents".into());
                }
                Ok(())
            }
            FeatureColumn::Indicator { categorical } => {
                if !categorical.is_categorical() {
                    return bad("indicator needs a categorical column".into());
                }
                categorical.validate()
            }
            FeatureColumn::Embedding {
                categorical,
                dimension,
                ..
            } => {
                if *dimension == 0 {
                    return bad("dimension must be at least 1".into());
                }
                if !categorical.is_categorical() {
                    return bad("embedding needs a categorical column".into());
                }
                categorical.validate()
            }
            FeatureColumn::SharedEmbedding {
                categorical,
                dimension,
                ..
            } => {
                if *dimension == 0 {
                    return bad("dimension must be at least 1".into());
                }
                if categorical.is_empty() {
                    return bad("needs at least one categorical column".into());
                }
                let sizes: Vec<Option<usize>> =
                    categorical.iter().map(FeatureColumn::num_buckets).collect();
                for c in categorical {
                    if !c.is_categorical() {
                        return bad(format!("{} is not categorical", c.name()));
                    }
                    c.validate()?;
                }
                if sizes.windows(2).any(|w| w[0] != w[1]) {
                    return bad("shared columns must have equal bucket counts".into());
                }
                Ok(())
            }
        }
    }

    /// Width of this column's block in `input_layer`.
    pub fn output_dim(&self) -> Result<usize> {
        match self {
            FeatureColumn::Numeric { dim, .. } => Ok(*dim),
            FeatureColumn::Bucketized { .. } => Ok(self.num_buckets().unwrap_or(0)),
            FeatureColumn::Indicator { categorical } => categorical
                .num_buckets()
                .ok_or_else(|| Error::invalid("indicator needs a categorical column")),
            FeatureColumn::Embedding { dimension, .. } => Ok(*dimension),
            FeatureColumn::SharedEmbedding {
                categorical,
                dimension,
                ..
            } => Ok(dimension * categorical.len()),
            FeatureColumn::Hashed { .. } | FeatureColumn::Crossed { .. } => {
                Err(Error::invalid(format!(
                    "categorical column {} must be wrapped in an indicator or embedding column",
                    self.name()
                )))
            }
        }
    }

    /// Per-example bucket ids of a categorical column.
    pub fn ids(&self, batch: &InputBatch) -> Result<Vec<Vec<usize>>> {
        match self {
            FeatureColumn::Hashed { name, num_buckets } => Ok(batch
                .feature(name)?
                .strings()
                .iter()
                .map(|vals| vals.iter().map(|v| hash_bucket(v, *num_buckets)).collect())
                .collect()),
            FeatureColumn::Crossed { names, num_buckets } => {
                let parents: Vec<Vec<Vec<String>>> = names
                    .iter()
                    .map(|n| Ok(batch.feature(n)?.strings()))
                    .collect::<Result<_>>()?;
                let b = batch.batch_size();
                Ok((0..b)
                    .map(|i| {
                        let row: Vec<Vec<String>> = parents.iter().map(|p| p[i].clone()).collect();
                        cross(&row, *num_buckets)
                    })
                    .collect())
            }
            FeatureColumn::Bucketized { source, boundaries } => {
                let FeatureColumn::Numeric { name, dim } = source.as_ref() else {
                    return Err(Error::invalid("bucketized source must be numeric"));
                };
                let dense = batch.feature(name)?.to_dense(name, *dim)?;
                let nb = boundaries.len() + 1;
                Ok(dense
                    .data()
                    .chunks(*dim)
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .map(|(i, &x)| i * nb + bucketize(x, boundaries))
                            .collect()
                    })
                    .collect())
            }
            _ => Err(Error::invalid(format!(
                "{} is not a categorical column",
                self.name()
            ))),
        }
    }

    fn categorical_parts(&self) -> Vec<&FeatureColumn> {
        match self {
            FeatureColumn::SharedEmbedding { categorical, .. } => categorical.iter().collect(),
            FeatureColumn::Embedding { categorical, .. }
            | FeatureColumn::Indicator { categorical } => {
                vec![categorical.as_ref()]
            }
            other => vec![other],
        }
    }
}

fn check_present(features: &Features, column: &FeatureColumn) -> Result<()> {
    for name in column.source_features() {
        features.kind(&name)?;
    }
    Ok(())
}

/// Ids padded with -1 into a `[batch, max_len]` tensor.
fn ids_input(g: &mut Graph, column: &FeatureColumn) -> NodeId {
    let col = column.clone();
    g.feature_input(
        &column.name(),
        StaticShape::new(vec![None, None]),
        Arc::new(move |batch: &InputBatch| {
            let ids = col.ids(batch)?;
            let width = ids.iter().map(Vec::len).max().unwrap_or(0).max(1);
            let mut data = vec![-1.0; ids.len() * width];
            for (r, row) in ids.iter().enumerate() {
                for (c, &id) in row.iter().enumerate() {
                    data[r * width + c] = id as f64;
                }
            }
            Tensor::new(vec![ids.len(), width], data)
        }),
    )
}

/// Multi-hot counts over the id space, computed on the host.
fn multi_hot_input(g: &mut Graph, column: &FeatureColumn, name: String) -> Result<NodeId> {
    let n = column
        .num_buckets()
        .ok_or_else(|| Error::invalid(format!("{} is not categorical", column.name())))?;
    let col = column.clone();
    Ok(g.feature_input(
        &name,
        StaticShape::batched(&[n]),
        Arc::new(move |batch: &InputBatch| {
            let ids = col.ids(batch)?;
            let mut data = vec![0.0; ids.len() * n];
            for (r, row) in ids.iter().enumerate() {
                for &id in row {
                    data[r * n + id] += 1.0;
                }
            }
            Tensor::new(vec![ids.len(), n], data)
        }),
    ))
}

fn numeric_input(g: &mut Graph, name: &str, dim: usize) -> NodeId {
    let owned = name.to_string();
    g.feature_input(
        name,
        StaticShape::batched(&[dim]),
        Arc::new(move |batch: &InputBatch| batch.feature(&owned)?.to_dense(&owned, dim)),
    )
}

/// Embedding table for a column; shared columns resolve to one variable.
fn embedding_table(g: &mut Graph, key: &str, rows: usize, dimension: usize) -> Result<NodeId> {
    let stddev = 1.0 / (dimension as f64).sqrt();
    let var = g.variable_scope(key, None, |g| {
        g.get_variable_with(
            "embedding_weights",
            &[rows, dimension],
            Initializer::Normal { stddev },
            Some(Reuse::Auto),
            true,
            Collection::Model,
        )
    })?;
    Ok(var.node)
}

/// Dense `[batch, Σ output_dim]` input built from the columns in order.
pub fn input_layer(
    g: &mut Graph,
    features: &Features,
    columns: &[FeatureColumn],
) -> Result<NodeId> {
    if columns.is_empty() {
        return Err(Error::invalid("input_layer needs at least one column"));
    }
    for c in columns {
        c.validate()?;
        c.output_dim()?;
        check_present(features, c)?;
    }
    let blocks = g.variable_scope("input_layer", None, |g| {
        let mut blocks = Vec::with_capacity(columns.len());
        for column in columns {
            match column {
                FeatureColumn::Numeric { name, dim } => blocks.push(numeric_input(g, name, *dim)),
                FeatureColumn::Bucketized { .. } => {
                    blocks.push(multi_hot_input(g, column, column.name())?);
                }
                FeatureColumn::Indicator { categorical } => {
                    blocks.push(multi_hot_input(g, categorical, column.name())?);
                }
                FeatureColumn::Embedding {
                    categorical,
                    dimension,
                    combiner,
                } => {
                    let rows = categorical.num_buckets().expect("validated");
                    let table = embedding_table(g, &column.name(), rows, *dimension)?;
                    let ids = ids_input(g, categorical);
                    blocks.push(g.embedding_combine(table, ids, *combiner)?);
                }
                FeatureColumn::SharedEmbedding {
                    dimension,
                    shared_name,
                    combiner,
                    ..
                } => {
                    let parts = column.categorical_parts();
                    let rows = parts[0].num_buckets().expect("validated");
                    let table = embedding_table(g, shared_name, rows, *dimension)?;
                    for part in parts {
                        let ids = ids_input(g, part);
                        blocks.push(g.embedding_combine(table, ids, *combiner)?);
                    }
                }
                FeatureColumn::Hashed { .. } | FeatureColumn::Crossed { .. } => {
                    unreachable!("rejected above")
                }
            }
        }
        Ok(blocks)
    })?;
    if blocks.len() == 1 {
        Ok(blocks[0])
    } else {
        g.concat(&blocks, 1)
    }
}

/// Linear logits `[batch, n_outputs]`: Σ per-column weight lookups + bias.
pub fn linear_model(
    g: &mut Graph,
    features: &Features,
    columns: &[FeatureColumn],
    n_outputs: usize,
) -> Result<NodeId> {
    if columns.is_empty() {
        return Err(Error::invalid("linear_model needs at least one column"));
    }
    for c in columns {
        if matches!(
            c,
            FeatureColumn::Embedding { .. } | FeatureColumn::SharedEmbedding { .. }
        ) {
            return Err(Error::invalid(format!(
                "embedding column {} is not allowed on the linear path",
                c.name()
            )));
        }
        c.validate()?;
        check_present(features, c)?;
    }
    g.variable_scope("linear", None, |g| {
        let mut terms = Vec::with_capacity(columns.len());
        for column in columns {
            let inner = match column {
                FeatureColumn::Indicator { categorical } => categorical.as_ref(),
                other => other,
            };
            let term = g.variable_scope(&column.name(), None, |g| match inner {
                FeatureColumn::Numeric { name, dim } => {
                    let w = g.get_variable("weights", &[*dim, n_outputs], Initializer::Zeros)?;
                    let x = numeric_input(g, name, *dim);
                    g.matmul(x, w.node)
                }
                categorical => {
                    let rows = categorical.num_buckets().expect("validated");
                    let w = g.get_variable("weights", &[rows, n_outputs], Initializer::Zeros)?;
                    let ids = ids_input(g, categorical);
                    g.embedding_combine(w.node, ids, Combiner::Sum)
                }
            })?;
            terms.push(term);
        }
        let bias = g.get_variable("bias", &[n_outputs], Initializer::Zeros)?;
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        g.add(acc, bias.node)
    })
}
