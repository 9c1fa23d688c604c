//! Convenience constructors for primitive ops.

use super::{Combiner, Graph, NodeId, Primitive};
use crate::error::Result;

impl Graph {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let c = self.scalar(factor);
        self.mul(x, c)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Neg, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Abs, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Tanh, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Log, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::Softmax, &[x])
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.op(Primitive::ReduceSum { axis }, &[x])
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.op(Primitive::ReduceMean { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.op(Primitive::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[isize]) -> Result<NodeId> {
        self.op(
            Primitive::Reshape {
                dims: dims.to_vec(),
            },
            &[x],
        )
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.op(Primitive::Slice { axis, start, len }, &[x])
    }

    pub fn one_hot(&mut self, indices: NodeId, depth: usize) -> Result<NodeId> {
        self.op(Primitive::OneHot { depth }, &[indices])
    }

    pub fn gather(&mut self, table: NodeId, indices: NodeId) -> Result<NodeId> {
        self.op(Primitive::Gather, &[table, indices])
    }

    pub fn embedding_combine(
        &mut self,
        table: NodeId,
        ids: NodeId,
        combiner: Combiner,
    ) -> Result<NodeId> {
        self.op(Primitive::EmbeddingCombine { combiner }, &[table, ids])
    }

    pub fn conv2d(&mut self, x: NodeId, filters: NodeId) -> Result<NodeId> {
        self.op(Primitive::Conv2d, &[x, filters])
    }

    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        pool: (usize, usize),
        strides: (usize, usize),
    ) -> Result<NodeId> {
        self.op(Primitive::MaxPool2d { pool, strides }, &[x])
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, training: bool) -> Result<NodeId> {
        self.op(Primitive::Dropout { rate, training }, &[x])
    }

    pub fn sparse_softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: NodeId,
    ) -> Result<NodeId> {
        self.op(Primitive::SparseSoftmaxCrossEntropy, &[logits, labels])
    }

    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: NodeId,
        binary_labels: bool,
    ) -> Result<NodeId> {
        self.op(
            Primitive::SigmoidCrossEntropy { binary_labels },
            &[logits, labels],
        )
    }

    pub fn weighted_mean(&mut self, values: NodeId, weights: NodeId) -> Result<NodeId> {
        self.op(Primitive::WeightedMean, &[values, weights])
    }

    pub fn argmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::ArgMax, &[x])
    }

    pub fn equal(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Primitive::Equal, &[a, b])
    }

    pub fn ones_like(&mut self, x: NodeId) -> Result<NodeId> {
        self.op(Primitive::OnesLike, &[x])
    }

    pub fn ratio(&mut self, num: NodeId, den: NodeId, metric: &str) -> Result<NodeId> {
        self.op(
            Primitive::Ratio {
                metric: metric.to_string(),
            },
            &[num, den],
        )
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.mul(x, x)
    }
}
