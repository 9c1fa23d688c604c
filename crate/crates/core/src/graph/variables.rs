use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NodeId;
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, mix};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub(crate) usize);

/// Handle returned by `get_variable`: the variable and its read node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variable {
    pub id: VarId,
    pub node: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    Model,
    /// Optimizer state attached to a model variable.
    Slot,
    /// Metric accumulators and other graph-local state.
    Local,
    GlobalStep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableDef {
    pub name: String,
    pub shape: Shape,
    pub trainable: bool,
    pub collection: Collection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reuse {
    /// Creation required.
    No,
    /// Must already exist.
    Yes,
    /// Reuse if present, otherwise create.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Initializer {
    Zeros,
    Constant(f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    GlorotUniform,
    Normal {
        stddev: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    Value(Tensor),
}

impl Initializer {
    /// Glorot-uniform for rank ≥ 2, zeros otherwise.
    pub fn default_for(shape: &[usize]) -> Initializer {
        if shape.len() >= 2 {
            Initializer::GlorotUniform
        } else {
            Initializer::Zeros
        }
    }

    /// Values are drawn from a stream keyed by (graph seed, variable name), so
    /// they do not depend on creation order.
    pub(crate) fn materialize(&self, shape: &[usize], seed: u64, name: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, fnv1a64(name.as_bytes())));
        let data = match self {
            Initializer::Zeros => vec![0.0; n],
            Initializer::Constant(c) => vec![*c; n],
            Initializer::GlorotUniform => {
                let (fan_in, fan_out) = fans(shape);
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
            }
            Initializer::Normal { stddev } => (0..n)
                .map(|_| {
                    // Box-Muller; u1 kept away from 0.
                    let u1: f64 = 1.0 - rng.gen::<f64>();
                    let u2: f64 = rng.gen();
                    stddev * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect(),
            Initializer::Uniform { low, high } => {
                if !(low < high) {
                    return Err(Error::invalid(format!(
                        "empty uniform range [{low}, {high})"
                    )));
                }
                (0..n).map(|_| rng.gen_range(*low..*high)).collect()
            }
            Initializer::Value(t) => {
                if t.dims() != shape {
                    return Err(Error::VariableShapeConflict {
                        name: name.to_string(),
                        existing: t.dims().to_vec(),
                        requested: shape.to_vec(),
                    });
                }
                t.data().to_vec()
            }
        };
        Tensor::new(shape.to_vec(), data)
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        _ => {
            let receptive: usize = shape[..shape.len() - 2].iter().product();
            let c = shape[shape.len() - 2];
            let o = shape[shape.len() - 1];
            (c * receptive, o * receptive)
        }
    }
}

#[derive(Default)]
pub(crate) struct VariableStore {
    defs: Vec<VariableDef>,
    values: Vec<Tensor>,
    by_name: HashMap<String, VarId>,
}

impl VariableStore {
    pub fn create(&mut self, def: VariableDef, value: Tensor) -> Result<VarId> {
        if self.by_name.contains_key(&def.name) {
            return Err(Error::VariableExists(def.name));
        }
        let id = VarId(self.defs.len());
        self.by_name.insert(def.name.clone(), id);
        self.defs.push(def);
        self.values.push(value);
        Ok(id)
    }

    pub fn lookup(&self, name: &str) -> Option<VarId> {
        self.by_name.get(name).copied()
    }

    pub fn def(&self, id: VarId) -> &VariableDef {
        &self.defs[id.0]
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: VarId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> Vec<VarId> {
        (0..self.defs.len()).map(VarId).collect()
    }
}
