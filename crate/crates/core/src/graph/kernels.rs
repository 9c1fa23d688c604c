//! Forward and gradient kernels for every primitive op kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::shape::StaticShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Sum,
    #[default]
    Mean,
    Sqrtn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Neg,
    Abs,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softmax,
    ReduceSum {
        axis: Option<usize>,
    },
    ReduceMean {
        axis: Option<usize>,
    },
    Concat {
        axis: usize,
    },
    Reshape {
        dims: Vec<isize>,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    OneHot {
        depth: usize,
    },
    Gather,
    EmbeddingCombine {
        combiner: Combiner,
    },
    Conv2d,
    MaxPool2d {
        pool: (usize, usize),
        strides: (usize, usize),
    },
    Dropout {
        rate: f64,
        training: bool,
    },
    SparseSoftmaxCrossEntropy,
    SigmoidCrossEntropy {
        binary_labels: bool,
    },
    WeightedMean,
    ArgMax,
    Equal,
    OnesLike,
    /// `num / den` for scalar accumulators; errors while `den` is zero.
    Ratio {
        metric: String,
    },
}

/// Per-node execution context; `seed` drives stochastic kernels.
#[derive(Clone, Copy, Debug)]
pub struct KernelCtx {
    pub seed: u64,
}

type Grads = Vec<Option<Tensor>>;

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Neg => "neg",
            Primitive::Abs => "abs",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softmax => "softmax",
            Primitive::ReduceSum { .. } => "reduce_sum",
            Primitive::ReduceMean { .. } => "reduce_mean",
            Primitive::Concat { .. } => "concat",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Slice { .. } => "slice",
            Primitive::OneHot { .. } => "one_hot",
            Primitive::Gather => "gather",
            Primitive::EmbeddingCombine { .. } => "embedding_combine",
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::Dropout { .. } => "dropout",
            Primitive::SparseSoftmaxCrossEntropy => "sparse_softmax_cross_entropy",
            Primitive::SigmoidCrossEntropy { .. } => "sigmoid_cross_entropy",
            Primitive::WeightedMean => "weighted_mean",
            Primitive::ArgMax => "argmax",
            Primitive::Equal => "equal",
            Primitive::OnesLike => "ones_like",
            Primitive::Ratio { .. } => "ratio",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Concat { .. } => None,
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Gather
            | Primitive::EmbeddingCombine { .. }
            | Primitive::Conv2d
            | Primitive::SparseSoftmaxCrossEntropy
            | Primitive::SigmoidCrossEntropy { .. }
            | Primitive::WeightedMean
            | Primitive::Ratio { .. }
            | Primitive::Equal => Some(2),
            _ => Some(1),
        }
    }

    /// Static output shape; `None` dims are unknown until execution.
    pub fn infer(&self, inputs: &[&StaticShape]) -> Result<StaticShape> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} expects {n} inputs, got {}",
                    self.name(),
                    inputs.len()
                )));
            }
        }
        let op = self.name();
        match self {
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || !StaticShape::dim_eq(a.dim(1), b.dim(0)) {
                    return Err(Error::shape(op, a.dims(), b.dims()));
                }
                Ok(StaticShape::new(vec![a.dim(0), b.dim(1)]))
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                StaticShape::broadcast(op, inputs[0], inputs[1])
            }
            Primitive::Equal => {
                if !inputs[0].compatible(inputs[1]) {
                    return Err(Error::shape(op, inputs[0].dims(), inputs[1].dims()));
                }
                Ok(inputs[0].merge(inputs[1]))
            }
            Primitive::Neg
            | Primitive::Abs
            | Primitive::Relu
            | Primitive::Sigmoid
            | Primitive::Tanh
            | Primitive::Exp
            | Primitive::Log
            | Primitive::OnesLike
            | Primitive::Dropout { .. } => Ok(inputs[0].clone()),
            Primitive::Ratio { .. } => {
                if inputs[0].numel() != Some(1) || inputs[1].numel() != Some(1) {
                    return Err(Error::shape(op, inputs[0].dims(), inputs[1].dims()));
                }
                Ok(StaticShape::scalar())
            }
            Primitive::Softmax => {
                if inputs[0].rank() == 0 {
                    return Err(Error::invalid("softmax needs rank >= 1"));
                }
                Ok(inputs[0].clone())
            }
            Primitive::ReduceSum { axis } | Primitive::ReduceMean { axis } => match axis {
                None => Ok(StaticShape::scalar()),
                Some(ax) => {
                    let s = inputs[0];
                    if *ax >= s.rank() {
                        return Err(Error::invalid(format!(
                            "{op} axis {ax} out of range for rank {}",
                            s.rank()
                        )));
                    }
                    let mut dims = s.dims().to_vec();
                    dims.remove(*ax);
                    Ok(StaticShape::new(dims))
                }
            },
            Primitive::Concat { axis } => {
                let Some(first) = inputs.first() else {
                    return Err(Error::invalid("concat needs at least one input"));
                };
                if *axis >= first.rank() {
                    return Err(Error::invalid("concat axis out of range"));
                }
                let mut dims = first.dims().to_vec();
                for other in &inputs[1..] {
                    if other.rank() != first.rank() {
                        return Err(Error::shape(op, first.dims(), other.dims()));
                    }
                    for (i, (d, o)) in dims.iter_mut().zip(other.dims()).enumerate() {
                        if i == *axis {
                            *d = match (*d, *o) {
                                (Some(x), Some(y)) => Some(x + y),
                                _ => None,
                            };
                        } else if !StaticShape::dim_eq(*d, *o) {
                            return Err(Error::shape(op, first.dims(), other.dims()));
                        } else {
                            *d = d.or(*o);
                        }
                    }
                }
                Ok(StaticShape::new(dims))
            }
            Primitive::Reshape { dims } => {
                let input = inputs[0];
                let wildcard = dims.iter().filter(|&&d| d == -1).count();
                if wildcard > 1 || dims.iter().any(|&d| d < -1) {
                    return Err(Error::invalid(format!("bad reshape target {dims:?}")));
                }
                let known: usize = dims
                    .iter()
                    .filter(|&&d| d >= 0)
                    .map(|&d| d as usize)
                    .product();
                let total = input.numel();
                let out = dims
                    .iter()
                    .map(|&d| {
                        if d >= 0 {
                            Some(d as usize)
                        } else {
                            total.and_then(|t| (known > 0).then(|| t / known))
                        }
                    })
                    .collect::<Vec<_>>();
                if let Some(t) = total {
                    if wildcard == 0 && known != t
                        || wildcard == 1 && (known == 0 || t % known != 0)
                    {
                        return Err(Error::shape(op, input.dims(), &out));
                    }
                }
                Ok(StaticShape::new(out))
            }
            Primitive::Slice { axis, start, len } => {
                let s = inputs[0];
                if *axis >= s.rank() {
                    return Err(Error::invalid("slice axis out of range"));
                }
                if let Some(n) = s.dim(*axis) {
                    if start + len > n {
                        return Err(Error::invalid(format!(
                            "slice [{start}, {}) exceeds dimension {n}",
                            start + len
                        )));
                    }
                }
                let mut dims = s.dims().to_vec();
                dims[*axis] = Some(*len);
                Ok(StaticShape::new(dims))
            }
            Primitive::OneHot { depth } => {
                let mut dims = inputs[0].dims().to_vec();
                dims.push(Some(*depth));
                Ok(StaticShape::new(dims))
            }
            Primitive::Gather => {
                let (table, idx) = (inputs[0], inputs[1]);
                if table.rank() == 0 {
                    return Err(Error::shape(op, table.dims(), idx.dims()));
                }
                let mut dims = idx.dims().to_vec();
                dims.extend_from_slice(&table.dims()[1..]);
                Ok(StaticShape::new(dims))
            }
            Primitive::EmbeddingCombine { .. } => {
                let (table, ids) = (inputs[0], inputs[1]);
                if table.rank() != 2 || ids.rank() != 2 {
                    return Err(Error::shape(op, table.dims(), ids.dims()));
                }
                Ok(StaticShape::new(vec![ids.dim(0), table.dim(1)]))
            }
            Primitive::Conv2d => {
                let (x, f) = (inputs[0], inputs[1]);
                if x.rank() != 4 || f.rank() != 4 || !StaticShape::dim_eq(x.dim(3), f.dim(2)) {
                    return Err(Error::shape(op, x.dims(), f.dims()));
                }
                let out = |n: Option<usize>, k: Option<usize>| -> Result<Option<usize>> {
                    match (n, k) {
                        (Some(n), Some(k)) if k > n || k == 0 => {
                            Err(Error::shape(op, x.dims(), f.dims()))
                        }
                        (Some(n), Some(k)) => Ok(Some(n - k + 1)),
                        _ => Ok(None),
                    }
                };
                Ok(StaticShape::new(vec![
                    x.dim(0),
                    out(x.dim(1), f.dim(0))?,
                    out(x.dim(2), f.dim(1))?,
                    f.dim(3),
                ]))
            }
            Primitive::MaxPool2d { pool, strides } => {
                let x = inputs[0];
                if x.rank() != 4 || pool.0 == 0 || pool.1 == 0 || strides.0 == 0 || strides.1 == 0 {
                    return Err(Error::invalid(format!(
                        "max_pool2d needs rank-4 input and positive window, got {:?}",
                        x.dims()
                    )));
                }
                let out = |n: Option<usize>, k: usize, s: usize| -> Result<Option<usize>> {
                    match n {
                        Some(n) if k > n => Err(Error::invalid(format!(
                            "pool window {k} larger than input dimension {n}"
                        ))),
                        Some(n) => Ok(Some((n - k) / s + 1)),
                        None => Ok(None),
                    }
                };
                Ok(StaticShape::new(vec![
                    x.dim(0),
                    out(x.dim(1), pool.0, strides.0)?,
                    out(x.dim(2), pool.1, strides.1)?,
                    x.dim(3),
                ]))
            }
            Primitive::SparseSoftmaxCrossEntropy => {
                let (logits, labels) = (inputs[0], inputs[1]);
                if logits.rank() != 2
                    || labels.rank() != 1
                    || !StaticShape::dim_eq(logits.dim(0), labels.dim(0))
                {
                    return Err(Error::shape(op, logits.dims(), labels.dims()));
                }
                Ok(StaticShape::new(vec![logits.dim(0).or(labels.dim(0))]))
            }
            Primitive::SigmoidCrossEntropy { .. } => {
                if !inputs[0].compatible(inputs[1]) {
                    return Err(Error::shape(op, inputs[0].dims(), inputs[1].dims()));
                }
                Ok(inputs[0].merge(inputs[1]))
            }
            Primitive::WeightedMean => {
                let (v, w) = (inputs[0], inputs[1]);
                if !(w.rank() == 0 || v.compatible(w)) {
                    return Err(Error::shape(op, v.dims(), w.dims()));
                }
                Ok(StaticShape::scalar())
            }
            Primitive::ArgMax => {
                let s = inputs[0];
                if s.rank() == 0 {
                    return Err(Error::invalid("argmax needs rank >= 1"));
                }
                Ok(StaticShape::new(s.dims()[..s.rank() - 1].to_vec()))
            }
        }
    }

    pub fn forward(&self, inputs: &[&Tensor], ctx: KernelCtx) -> Result<Tensor> {
        match self {
            Primitive::MatMul => matmul(inputs[0], inputs[1]),
            Primitive::Add => broadcast_binary("add", inputs[0], inputs[1], |a, b| a + b),
            Primitive::Sub => broadcast_binary("sub", inputs[0], inputs[1], |a, b| a - b),
            Primitive::Mul => broadcast_binary("mul", inputs[0], inputs[1], |a, b| a * b),
            Primitive::Equal => {
                check_same_shape("equal", inputs[0], inputs[1])?;
                Ok(zip_map(inputs[0], inputs[1], |a, b| {
                    f64::from(u8::from(a == b))
                }))
            }
            Primitive::Neg => Ok(inputs[0].map(|v| -v)),
            Primitive::Abs => Ok(inputs[0].map(f64::abs)),
            Primitive::Relu => Ok(inputs[0].map(|v| v.max(0.0))),
            Primitive::Sigmoid => Ok(inputs[0].map(sigmoid)),
            Primitive::Tanh => Ok(inputs[0].map(f64::tanh)),
            Primitive::Exp => Ok(inputs[0].map(f64::exp)),
            Primitive::Log => Ok(inputs[0].map(f64::ln)),
            Primitive::Softmax => Ok(softmax(inputs[0])),
            Primitive::ReduceSum { axis } => reduce(inputs[0], *axis, false),
            Primitive::ReduceMean { axis } => reduce(inputs[0], *axis, true),
            Primitive::Concat { axis } => concat(inputs, *axis),
            Primitive::Reshape { dims } => {
                let target = resolve_reshape(dims, inputs[0])?;
                inputs[0].clone().reshape(target)
            }
            Primitive::Slice { axis, start, len } => slice(inputs[0], *axis, *start, *len),
            Primitive::OneHot { depth } => one_hot(inputs[0], *depth),
            Primitive::Gather => gather(inputs[0], inputs[1]),
            Primitive::EmbeddingCombine { combiner } => {
                embedding_combine(inputs[0], inputs[1], *combiner)
            }
            Primitive::Conv2d => conv2d(inputs[0], inputs[1]),
            Primitive::MaxPool2d { pool, strides } => Ok(max_pool2d(inputs[0], *pool, *strides)?.0),
            Primitive::Dropout { rate, training } => {
                if !training || *rate == 0.0 {
                    return Ok(inputs[0].clone());
                }
                let mask = dropout_mask(inputs[0].numel(), *rate, ctx.seed)?;
                let mut out = inputs[0].clone();
                for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Ok(out)
            }
            Primitive::SparseSoftmaxCrossEntropy => {
                Ok(sparse_softmax_xent(inputs[0], inputs[1])?.0)
            }
            Primitive::SigmoidCrossEntropy { binary_labels } => {
                check_same_shape("sigmoid_cross_entropy", inputs[0], inputs[1])?;
                if *binary_labels {
                    check_binary_labels(inputs[1])?;
                }
                Ok(zip_map(inputs[0], inputs[1], |x, z| {
                    x.max(0.0) - x * z + (-x.abs()).exp().ln_1p()
                }))
            }
            Primitive::WeightedMean => {
                let (v, w) = (inputs[0], inputs[1]);
                let w = broadcast_weights(v, w)?;
                let wsum: f64 = w.iter().sum();
                if wsum == 0.0 {
                    return Ok(Tensor::scalar(0.0));
                }
                let total: f64 = v.data().iter().zip(&w).map(|(a, b)| a * b).sum();
                Ok(Tensor::scalar(total / wsum))
            }
            Primitive::ArgMax => Ok(argmax(inputs[0])),
            Primitive::OnesLike => Ok(Tensor::full(inputs[0].shape().clone(), 1.0)),
            Primitive::Ratio { metric } => {
                let num = inputs[0].scalar_value()?;
                let den = inputs[1].scalar_value()?;
                if den == 0.0 {
                    return Err(Error::NoDataAccumulated(metric.clone()));
                }
                Ok(Tensor::scalar(num / den))
            }
        }
    }

    /// Vector-Jacobian product: gradients of each input given the output gradient.
    pub fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        ctx: KernelCtx,
    ) -> Result<Grads> {
        let unary = |f: &dyn Fn(f64, f64) -> f64| -> Grads {
            // f(x, y) -> dy/dx
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(output.data())
                .zip(grad.data())
                .map(|((&xv, &yv), &g)| g * f(xv, yv))
                .collect();
            vec![Some(
                Tensor::new(x.shape().clone(), data).expect("same shape"),
            )]
        };
        Ok(match self {
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![
                    Some(matmul_t(grad, b, false, true)?),
                    Some(matmul_t(a, grad, true, false)?),
                ]
            }
            Primitive::Add => vec![
                Some(reduce_to(grad, inputs[0])),
                Some(reduce_to(grad, inputs[1])),
            ],
            Primitive::Sub => vec![
                Some(reduce_to(grad, inputs[0])),
                Some(reduce_to(&grad.map(|g| -g), inputs[1])),
            ],
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = broadcast_binary("mul", grad, b, |g, y| g * y)?;
                let gb = broadcast_binary("mul", grad, a, |g, x| g * x)?;
                vec![Some(reduce_to(&ga, a)), Some(reduce_to(&gb, b))]
            }
            Primitive::Neg => unary(&|_, _| -1.0),
            Primitive::Abs => unary(&|x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Primitive::Relu => unary(&|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Primitive::Sigmoid => unary(&|_, y| y * (1.0 - y)),
            Primitive::Tanh => unary(&|_, y| 1.0 - y * y),
            Primitive::Exp => unary(&|_, y| y),
            Primitive::Log => unary(&|x, _| 1.0 / x),
            Primitive::Softmax => {
                let width = *output.dims().last().expect("rank >= 1");
                let mut gx = vec![0.0; output.numel()];
                for ((y, g), out) in output
                    .data()
                    .chunks(width.max(1))
                    .zip(grad.data().chunks(width.max(1)))
                    .zip(gx.chunks_mut(width.max(1)))
                {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(Tensor::new(output.shape().clone(), gx)?)]
            }
            Primitive::ReduceSum { axis } | Primitive::ReduceMean { axis } => {
                let x = inputs[0];
                let mean = matches!(self, Primitive::ReduceMean { .. });
                let (outer, n, inner) = split_axis(x.dims(), *axis);
                let scale = if mean && n > 0 { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            gx[(o * n + j) * inner + k] = grad.data()[o * inner + k] * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().clone(), gx)?)]
            }
            Primitive::Concat { axis } => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for x in inputs {
                    let len = x.dims()[*axis];
                    grads.push(Some(slice(grad, *axis, offset, len)?));
                    offset += len;
                }
                grads
            }
            Primitive::Reshape { .. } => {
                vec![Some(grad.clone().reshape(inputs[0].shape().clone())?)]
            }
            Primitive::Slice { axis, start, .. } => {
                let x = inputs[0];
                let mut gx = Tensor::zeros(x.shape().clone());
                let (outer, n, inner) = split_axis(x.dims(), Some(*axis));
                let len = grad.dims()[*axis];
                for o in 0..outer {
                    for j in 0..len {
                        let src = (o * len + j) * inner;
                        let dst = (o * n + start + j) * inner;
                        gx.data_mut()[dst..dst + inner]
                            .copy_from_slice(&grad.data()[src..src + inner]);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::OneHot { .. } | Primitive::ArgMax | Primitive::OnesLike => vec![None],
            Primitive::Equal => vec![None, None],
            Primitive::Ratio { .. } => {
                let den = inputs[1].scalar_value()?;
                let g = grad.scalar_value()?;
                vec![
                    Some(Tensor::new(inputs[0].shape().clone(), vec![g / den])?),
                    Some(Tensor::new(
                        inputs[1].shape().clone(),
                        vec![-g * inputs[0].scalar_value()? / (den * den)],
                    )?),
                ]
            }
            Primitive::Gather => {
                let (table, idx) = (inputs[0], inputs[1]);
                let width: usize = table.dims()[1..].iter().product();
                let mut gt = Tensor::zeros(table.shape().clone());
                for (row, &i) in idx.to_indices()?.iter().enumerate() {
                    let dst = i as usize * width;
                    for k in 0..width {
                        gt.data_mut()[dst + k] += grad.data()[row * width + k];
                    }
                }
                vec![Some(gt), None]
            }
            Primitive::EmbeddingCombine { combiner } => {
                let (table, ids) = (inputs[0], inputs[1]);
                let d = table.dims()[1];
                let k = ids.dims()[1];
                let ids = ids.to_indices()?;
                let mut gt = Tensor::zeros(table.shape().clone());
                for (b, row) in ids.chunks(k.max(1)).enumerate() {
                    let valid: Vec<usize> = row
                        .iter()
                        .filter(|&&i| i >= 0)
                        .map(|&i| i as usize)
                        .collect();
                    let scale = combiner_scale(*combiner, valid.len());
                    for &i in &valid {
                        for c in 0..d {
                            gt.data_mut()[i * d + c] += grad.data()[b * d + c] * scale;
                        }
                    }
                }
                vec![Some(gt), None]
            }
            Primitive::Conv2d => {
                let (gx, gf) = conv2d_backward(inputs[0], inputs[1], grad);
                vec![Some(gx), Some(gf)]
            }
            Primitive::MaxPool2d { pool, strides } => {
                let x = inputs[0];
                let (_, argmax) = max_pool2d(x, *pool, *strides)?;
                let mut gx = Tensor::zeros(x.shape().clone());
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += grad.data()[o];
                }
                vec![Some(gx)]
            }
            Primitive::Dropout { rate, training } => {
                if !training || *rate == 0.0 {
                    vec![Some(grad.clone())]
                } else {
                    let mask = dropout_mask(grad.numel(), *rate, ctx.seed)?;
                    let mut g = grad.clone();
                    for (v, m) in g.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    vec![Some(g)]
                }
            }
            Primitive::SparseSoftmaxCrossEntropy => {
                let (logits, labels) = (inputs[0], inputs[1]);
                let (_, probs, classes) = sparse_softmax_xent(logits, labels)?;
                let n = logits.dims()[1];
                let mut gl = probs;
                for (b, &c) in classes.iter().enumerate() {
                    gl[b * n + c] -= 1.0;
                    for v in &mut gl[b * n..(b + 1) * n] {
                        *v *= grad.data()[b];
                    }
                }
                vec![Some(Tensor::new(logits.shape().clone(), gl)?), None]
            }
            Primitive::SigmoidCrossEntropy { .. } => {
                let (x, z) = (inputs[0], inputs[1]);
                let gx = Tensor::new(
                    x.shape().clone(),
                    x.data()
                        .iter()
                        .zip(z.data())
                        .zip(grad.data())
                        .map(|((&xv, &zv), &g)| g * (sigmoid(xv) - zv))
                        .collect(),
                )?;
                let gz = zip_map(x, grad, |xv, g| -xv * g);
                vec![Some(gx), Some(gz)]
            }
            Primitive::WeightedMean => {
                let (v, w) = (inputs[0], inputs[1]);
                let wb = broadcast_weights(v, w)?;
                let wsum: f64 = wb.iter().sum();
                let g = grad.scalar_value()?;
                if wsum == 0.0 {
                    vec![
                        Some(Tensor::zeros(v.shape().clone())),
                        Some(Tensor::zeros(w.shape().clone())),
                    ]
                } else {
                    let mean = output.scalar_value()?;
                    let gv = Tensor::new(
                        v.shape().clone(),
                        wb.iter().map(|&wi| g * wi / wsum).collect(),
                    )?;
                    let per_elem: Vec<f64> =
                        v.data().iter().map(|&vi| g * (vi - mean) / wsum).collect();
                    let gw = if w.rank() == 0 {
                        Tensor::scalar(per_elem.iter().sum())
                    } else {
                        Tensor::new(w.shape().clone(), per_elem)?
                    };
                    vec![Some(gv), Some(gw)]
                }
            }
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &known(a.dims()), &known(b.dims())));
    }
    Ok(())
}

fn known(dims: &[usize]) -> Vec<Option<usize>> {
    dims.iter().map(|&d| Some(d)).collect()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().clone(), data).expect("same shape")
}

/// Elementwise op where one operand's shape is a suffix of the other's.
fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (big, a_is_big) = if a.rank() >= b.rank() {
        (a, true)
    } else {
        (b, false)
    };
    let small = if a_is_big { b } else { a };
    if !big.dims().ends_with(small.dims()) {
        return Err(Error::shape(op, &known(a.dims()), &known(b.dims())));
    }
    let n = small.numel();
    let data = big
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = small.data()[i % n];
            if a_is_big {
                f(v, s)
            } else {
                f(s, v)
            }
        })
        .collect();
    Tensor::new(big.shape().clone(), data)
}

/// Sums a broadcast gradient back down to `target`'s shape.
fn reduce_to(grad: &Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        return grad.clone();
    }
    let n = target.numel();
    let mut out = vec![0.0; n];
    for (i, &g) in grad.data().iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(target.shape().clone(), out).expect("target shape")
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, b, false, false)
}

/// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
fn matmul_t(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul", &known(a.dims()), &known(b.dims())));
    }
    let (ar, ac) = (a.dims()[0], a.dims()[1]);
    let (br, bc) = (b.dims()[0], b.dims()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape("matmul", &known(a.dims()), &known(b.dims())));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * bc + p];
                }
            } else {
                let brow = &bd[p * bc..(p + 1) * bc];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn softmax(x: &Tensor) -> Tensor {
    let width = (*x.dims().last().expect("rank >= 1")).max(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// (outer, axis length, inner) extents; `None` reduces everything.
fn split_axis(dims: &[usize], axis: Option<usize>) -> (usize, usize, usize) {
    match axis {
        None => (1, dims.iter().product(), 1),
        Some(ax) => (
            dims[..ax].iter().product(),
            dims[ax],
            dims[ax + 1..].iter().product(),
        ),
    }
}

fn reduce(x: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    if let Some(ax) = axis {
        if ax >= x.rank() {
            return Err(Error::exec(format!("reduce axis {ax} out of range")));
        }
    }
    let (outer, n, inner) = split_axis(x.dims(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            for k in 0..inner {
                out[o * inner + k] += x.data()[(o * n + j) * inner + k];
            }
        }
    }
    if mean && n > 0 {
        for v in &mut out {
            *v /= n as f64;
        }
    }
    let dims = match axis {
        None => vec![],
        Some(ax) => {
            let mut d = x.dims().to_vec();
            d.remove(ax);
            d
        }
    };
    Tensor::new(dims, out)
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    let mut dims = first.dims().to_vec();
    dims[axis] = 0;
    for x in inputs {
        if x.rank() != first.rank()
            || x.dims()
                .iter()
                .zip(first.dims())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape(
                "concat",
                &known(first.dims()),
                &known(x.dims()),
            ));
        }
        dims[axis] += x.dims()[axis];
    }
    let (outer, _, inner) = split_axis(first.dims(), Some(axis));
    let mut out = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for x in inputs {
            let chunk = x.dims()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(dims, out)
}

fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.dims(), Some(axis));
    if start + len > n {
        return Err(Error::exec(format!(
            "slice [{start}, {}) exceeds {n}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut dims = x.dims().to_vec();
    dims[axis] = len;
    Tensor::new(dims, out)
}

fn resolve_reshape(dims: &[isize], x: &Tensor) -> Result<Vec<usize>> {
    let known: usize = dims
        .iter()
        .filter(|&&d| d >= 0)
        .map(|&d| d as usize)
        .product();
    let total = x.numel();
    let out: Vec<usize> = dims
        .iter()
        .map(|&d| {
            if d >= 0 {
                d as usize
            } else if known == 0 {
                0
            } else {
                total / known
            }
        })
        .collect();
    if out.iter().product::<usize>() != total {
        return Err(Error::exec(format!(
            "cannot reshape {} into {dims:?}",
            x.shape()
        )));
    }
    Ok(out)
}

fn one_hot(idx: &Tensor, depth: usize) -> Result<Tensor> {
    let mut dims = idx.dims().to_vec();
    dims.push(depth);
    let mut out = vec![0.0; idx.numel() * depth];
    for (row, i) in idx.to_indices()?.into_iter().enumerate() {
        if i < 0 {
            continue;
        }
        if i as usize >= depth {
            return Err(Error::IndexOutOfRange {
                op: "one_hot",
                index: i,
                limit: depth,
            });
        }
        out[row * depth + i as usize] = 1.0;
    }
    Tensor::new(dims, out)
}

fn gather(table: &Tensor, idx: &Tensor) -> Result<Tensor> {
    let rows = table.dims()[0];
    let width: usize = table.dims()[1..].iter().product();
    let mut out = Vec::with_capacity(idx.numel() * width);
    for i in idx.to_indices()? {
        if i < 0 || i as usize >= rows {
            return Err(Error::IndexOutOfRange {
                op: "gather",
                index: i,
                limit: rows,
            });
        }
        let i = i as usize;
        out.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
    }
    let mut dims = idx.dims().to_vec();
    dims.extend_from_slice(&table.dims()[1..]);
    Tensor::new(dims, out)
}

fn combiner_scale(combiner: Combiner, n: usize) -> f64 {
    match (combiner, n) {
        (_, 0) | (Combiner::Sum, _) => 1.0,
        (Combiner::Mean, n) => 1.0 / n as f64,
        (Combiner::Sqrtn, n) => 1.0 / (n as f64).sqrt(),
    }
}

/// Combines table rows selected per example; negative ids are padding.
fn embedding_combine(table: &Tensor, ids: &Tensor, combiner: Combiner) -> Result<Tensor> {
    if table.rank() != 2 || ids.rank() != 2 {
        return Err(Error::shape(
            "embedding_combine",
            &known(table.dims()),
            &known(ids.dims()),
        ));
    }
    let (rows, d) = (table.dims()[0], table.dims()[1]);
    let (b, k) = (ids.dims()[0], ids.dims()[1]);
    let ids = ids.to_indices()?;
    let mut out = vec![0.0; b * d];
    for (e, row) in ids.chunks(k.max(1)).enumerate().take(b) {
        let mut n = 0;
        for &i in row {
            if i < 0 {
                continue;
            }
            if i as usize >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "embedding_combine",
                    index: i,
                    limit: rows,
                });
            }
            n += 1;
            let src = &table.data()[i as usize * d..(i as usize + 1) * d];
            for (o, &v) in out[e * d..(e + 1) * d].iter_mut().zip(src) {
                *o += v;
            }
        }
        let scale = combiner_scale(combiner, n);
        if scale != 1.0 {
            for o in &mut out[e * d..(e + 1) * d] {
                *o *= scale;
            }
        }
    }
    Tensor::new(vec![b, d], out)
}

fn conv2d(x: &Tensor, f: &Tensor) -> Result<Tensor> {
    let &[b, h, w, c] = x.dims() else {
        return Err(Error::shape("conv2d", &known(x.dims()), &known(f.dims())));
    };
    let &[kh, kw, fc, o] = f.dims() else {
        return Err(Error::shape("conv2d", &known(x.dims()), &known(f.dims())));
    };
    if fc != c || kh > h || kw > w {
        return Err(Error::shape("conv2d", &known(x.dims()), &known(f.dims())));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let xd = x.data();
    let fd = f.data();
    let mut out = vec![0.0; b * oh * ow * o];
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let dst = ((n * oh + i) * ow + j) * o;
                for p in 0..kh {
                    for q in 0..kw {
                        let src = ((n * h + i + p) * w + j + q) * c;
                        for ci in 0..c {
                            let xv = xd[src + ci];
                            let frow = &fd[((p * kw + q) * c + ci) * o..][..o];
                            for (acc, &fv) in out[dst..dst + o].iter_mut().zip(frow) {
                                *acc += xv * fv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, o], out)
}

fn conv2d_backward(x: &Tensor, f: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let &[b, h, w, c] = x.dims() else {
        unreachable!("checked in forward")
    };
    let &[kh, kw, _, o] = f.dims() else {
        unreachable!("checked in forward")
    };
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut gx = Tensor::zeros(x.shape().clone());
    let mut gf = Tensor::zeros(f.shape().clone());
    let (xd, fd, gd) = (x.data(), f.data(), g.data());
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let go = &gd[((n * oh + i) * ow + j) * o..][..o];
                for p in 0..kh {
                    for q in 0..kw {
                        let src = ((n * h + i + p) * w + j + q) * c;
                        for ci in 0..c {
                            let fbase = ((p * kw + q) * c + ci) * o;
                            let mut acc = 0.0;
                            for oc in 0..o {
                                acc += go[oc] * fd[fbase + oc];
                                gf.data_mut()[fbase + oc] += xd[src + ci] * go[oc];
                            }
                            gx.data_mut()[src + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gf)
}

/// Returns pooled output and, per output element, the flat input index of the max.
fn max_pool2d(
    x: &Tensor,
    pool: (usize, usize),
    strides: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let &[b, h, w, c] = x.dims() else {
        return Err(Error::exec("max_pool2d needs rank-4 input"));
    };
    if pool.0 > h || pool.1 > w {
        return Err(Error::exec("pool window larger than input"));
    }
    let oh = (h - pool.0) / strides.0 + 1;
    let ow = (w - pool.1) / strides.1 + 1;
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut arg = Vec::with_capacity(b * oh * ow * c);
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for p in 0..pool.0 {
                        for q in 0..pool.1 {
                            let idx =
                                ((n * h + i * strides.0 + p) * w + j * strides.1 + q) * c + ci;
                            let v = x.data()[idx];
                            if v > best || best_idx == usize::MAX {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, oh, ow, c], out)?, arg))
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
fn dropout_mask(n: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::exec(format!("dropout rate {rate} not in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Ok((0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Per-example loss, softmax probabilities and validated class ids.
fn sparse_softmax_xent(logits: &Tensor, labels: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<usize>)> {
    if logits.rank() != 2 || labels.rank() != 1 || labels.dims()[0] != logits.dims()[0] {
        return Err(Error::shape(
            "sparse_softmax_cross_entropy",
            &known(logits.dims()),
            &known(labels.dims()),
        ));
    }
    let n = logits.dims()[1];
    let probs = softmax(logits).into_data();
    let mut classes = Vec::with_capacity(labels.numel());
    let mut losses = Vec::with_capacity(labels.numel());
    for (b, &label) in labels.data().iter().enumerate() {
        if label.fract() != 0.0 || label < 0.0 || label >= n as f64 {
            return Err(Error::LabelOutOfRange {
                value: label,
                n_classes: n,
            });
        }
        let c = label as usize;
        let row = &logits.data()[b * n..(b + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        losses.push(lse - row[c]);
        classes.push(c);
    }
    Ok((Tensor::new(labels.shape().clone(), losses)?, probs, classes))
}

fn check_binary_labels(labels: &Tensor) -> Result<()> {
    match labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::LabelOutOfRange {
            value: v,
            n_classes: 2,
        }),
        None => Ok(()),
    }
}

fn broadcast_weights(values: &Tensor, weights: &Tensor) -> Result<Vec<f64>> {
    if weights.rank() == 0 {
        return Ok(vec![weights.data()[0]; values.numel()]);
    }
    if weights.shape() != values.shape() {
        return Err(Error::shape(
            "weighted_mean",
            &known(values.dims()),
            &known(weights.dims()),
        ));
    }
    Ok(weights.data().to_vec())
}

/// Index of the largest entry along the last axis; ties go to the lowest index.
fn argmax(x: &Tensor) -> Tensor {
    let width = (*x.dims().last().expect("rank >= 1")).max(1);
    let data = x
        .data()
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as f64
        })
        .collect();
    Tensor::new(x.dims()[..x.rank() - 1].to_vec(), data).expect("argmax shape")
}
