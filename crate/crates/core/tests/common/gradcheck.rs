//! Central finite differences against the analytic gradients.

use estimator::graph::{Combiner, Initializer};
use estimator::{ExecutionContext, Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct Case {
    pub name: String,
    /// Input values; `true` marks the ones differentiated against.
    pub inputs: Vec<(Tensor, bool)>,
    pub build: Build,
}

fn case(name: &str, inputs: Vec<(Tensor, bool)>, build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static) -> Case {
    Case {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// |a − n| / max(1, |a|, |n|): relative above magnitude 1, absolute below.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Largest error over every element of every differentiated input. The
/// output is reduced to a scalar through fixed non-uniform weights so that
/// every output element contributes differently.
pub fn max_error(c: &Case) -> Result<f64> {
    let mut g = Graph::new(17);
    let mut vars = Vec::new();
    let mut nodes = Vec::new();
    for (i, (t, diff)) in c.inputs.iter().enumerate() {
        if *diff {
            let v = g.get_variable(&format!("in{i}"), t.dims(), Initializer::Value(t.clone()))?;
            vars.push(v.id);
            nodes.push(v.node);
        } else {
            nodes.push(g.constant(t.clone()));
        }
    }
    let out = (c.build)(&mut g, &nodes)?;
    let mut ctx = ExecutionContext::new(g);
    let y = ctx.run(None, &[out])?.remove(0);
    let w: Vec<f64> = (0..y.numel()).map(|i| 0.3 + (i as f64 * 1.37 + 0.5).sin()).collect();
    let g = ctx.graph_mut();
    let w = g.constant(Tensor::new(y.shape().clone(), w)?);
    let weighted = g.mul(out, w)?;
    let loss = g.reduce_sum(weighted, None)?;
    let grads = g.gradients(loss, &vars)?;
    let analytic = ctx.run(None, &grads)?;

    let mut worst: f64 = 0.0;
    for (&v, a) in vars.iter().zip(&analytic) {
        let base = ctx.graph().var_value(v).clone();
        for k in 0..base.numel() {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[k] += delta;
                ctx.graph_mut().set_var_value(v, t)?;
                ctx.run(None, &[loss])?[0].scalar_value()
            };
            let numeric = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
            worst = worst.max(rel_error(a.data()[k], numeric));
        }
        ctx.graph_mut().set_var_value(v, base)?;
    }
    Ok(worst)
}

fn t(dims: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    t(dims, rng, 0.1, 1.0).map(|x| if x > 0.55 { x } else { -x })
}

fn ids(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// One case per differentiable primitive (several for ops with modes), plus
/// compositions through the index-valued ops.
pub fn primitive_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut r;
    let mut cases = vec![
        case("matmul", vec![(t(&[3, 4], r, -1.0, 1.0), true), (t(&[4, 2], r, -1.0, 1.0), true)], |g, x| g.matmul(x[0], x[1])),
        case("add", vec![(t(&[3, 4], r, -1.0, 1.0), true), (t(&[3, 4], r, -1.0, 1.0), true)], |g, x| g.add(x[0], x[1])),
        case("add_broadcast", vec![(t(&[3, 4], r, -1.0, 1.0), true), (t(&[4], r, -1.0, 1.0), true)], |g, x| g.add(x[0], x[1])),
        case("sub_broadcast", vec![(t(&[3, 4], r, -1.0, 1.0), true), (t(&[4], r, -1.0, 1.0), true)], |g, x| g.sub(x[0], x[1])),
        case("mul", vec![(t(&[2, 3], r, -1.0, 1.0), true), (t(&[2, 3], r, -1.0, 1.0), true)], |g, x| g.mul(x[0], x[1])),
        case("mul_scalar", vec![(t(&[2, 3], r, -1.0, 1.0), true), (t(&[], r, -1.0, 1.0), true)], |g, x| g.mul(x[0], x[1])),
        case("neg", vec![(t(&[2, 3], r, -1.0, 1.0), true)], |g, x| g.neg(x[0])),
        case("abs", vec![(off_zero(&[2, 3], r), true)], |g, x| g.abs(x[0])),
        case("relu", vec![(off_zero(&[2, 3], r), true)], |g, x| g.relu(x[0])),
        case("sigmoid", vec![(t(&[2, 3], r, -3.0, 3.0), true)], |g, x| g.sigmoid(x[0])),
        case("tanh", vec![(t(&[2, 3], r, -2.0, 2.0), true)], |g, x| g.tanh(x[0])),
        case("exp", vec![(t(&[2, 3], r, -1.0, 1.0), true)], |g, x| g.exp(x[0])),
        case("log", vec![(t(&[2, 3], r, 0.5, 2.0), true)], |g, x| g.log(x[0])),
        case("softmax", vec![(t(&[3, 4], r, -2.0, 2.0), true)], |g, x| g.softmax(x[0])),
        case("reduce_sum_all", vec![(t(&[3, 4], r, -1.0, 1.0), true)], |g, x| g.reduce_sum(x[0], None)),
        case("reduce_sum_axis0", vec![(t(&[3, 4], r, -1.0, 1.0), true)], |g, x| g.reduce_sum(x[0], Some(0))),
        case("reduce_sum_axis1", vec![(t(&[3, 4], r, -1.0, 1.0), true)], |g, x| g.reduce_sum(x[0], Some(1))),
        case("reduce_mean_all", vec![(t(&[3, 4], r, -1.0, 1.0), true)], |g, x| g.reduce_mean(x[0], None)),
        case("reduce_mean_axis1", vec![(t(&[2, 3, 2], r, -1.0, 1.0), true)], |g, x| g.reduce_mean(x[0], Some(1))),
        case("concat", vec![(t(&[2, 3], r, -1.0, 1.0), true), (t(&[2, 1], r, -1.0, 1.0), true)], |g, x| g.concat(&[x[0], x[1]], 1)),
        case("reshape", vec![(t(&[2, 6], r, -1.0, 1.0), true)], |g, x| g.reshape(x[0], &[3, -1])),
        case("slice", vec![(t(&[3, 4], r, -1.0, 1.0), true)], |g, x| g.slice(x[0], 1, 1, 2)),
        case(
            "gather",
            vec![(t(&[5, 3], r, -1.0, 1.0), true), (Tensor::vector(vec![4.0, 0.0, 4.0, 2.0]), false)],
            |g, x| g.gather(x[0], x[1]),
        ),
        case(
            "conv2d",
            vec![(t(&[2, 4, 4, 2], r, -1.0, 1.0), true), (t(&[2, 3, 2, 3], r, -1.0, 1.0), true)],
            |g, x| g.conv2d(x[0], x[1]),
        ),
        case(
            "max_pool2d",
            vec![(Tensor::new(vec![1, 4, 4, 2], (0..32).map(|i| ((i * 7) % 32) as f64 * 0.1).collect()).unwrap(), true)],
            |g, x| g.max_pool2d(x[0], (2, 2), (2, 2)),
        ),
        case(
            "max_pool2d_overlapping",
            vec![(Tensor::new(vec![1, 4, 4, 1], (0..16).map(|i| ((i * 5) % 16) as f64 * 0.1).collect()).unwrap(), true)],
            |g, x| g.max_pool2d(x[0], (2, 2), (1, 1)),
        ),
        case("dropout_training", vec![(t(&[4, 5], r, -1.0, 1.0), true)], |g, x| g.dropout(x[0], 0.4, true)),
        case("dropout_inference", vec![(t(&[4, 5], r, -1.0, 1.0), true)], |g, x| g.dropout(x[0], 0.4, false)),
        case(
            "sparse_softmax_cross_entropy",
            vec![(t(&[3, 4], r, -2.0, 2.0), true), (Tensor::vector(vec![0.0, 3.0, 1.0]), false)],
            |g, x| g.sparse_softmax_cross_entropy(x[0], x[1]),
        ),
        case(
            "sigmoid_cross_entropy",
            vec![(t(&[3, 2], r, -3.0, 3.0), true), (t(&[3, 2], r, 0.0, 1.0), true)],
            |g, x| g.sigmoid_cross_entropy(x[0], x[1], false),
        ),
        case(
            "weighted_mean",
            vec![(t(&[4], r, -1.0, 1.0), true), (t(&[4], r, 0.2, 2.0), true)],
            |g, x| g.weighted_mean(x[0], x[1]),
        ),
        case(
            "weighted_mean_scalar_weight",
            vec![(t(&[3, 2], r, -1.0, 1.0), true), (t(&[], r, 0.2, 2.0), true)],
            |g, x| g.weighted_mean(x[0], x[1]),
        ),
        case("ratio", vec![(t(&[], r, -1.0, 1.0), true), (t(&[], r, 0.5, 2.0), true)], |g, x| g.ratio(x[0], x[1], "m")),
        case("square", vec![(t(&[2, 3], r, -1.0, 1.0), true)], |g, x| g.square(x[0])),
        case("scale", vec![(t(&[2, 3], r, -1.0, 1.0), true)], |g, x| g.scale(x[0], -2.5)),
        // Index-valued ops have no derivative of their own; composed with a
        // differentiable input the gradient flows only through that input.
        case(
            "one_hot_mask",
            vec![(t(&[3, 4], r, -1.0, 1.0), true), (Tensor::vector(vec![2.0, 0.0, 3.0]), false)],
            |g, x| {
                let h = g.one_hot(x[1], 4)?;
                g.mul(x[0], h)
            },
        ),
        case("argmax_constant", vec![(t(&[3, 4], r, -1.0, 1.0), true)], |g, x| {
            let a = g.argmax(x[0])?;
            let s = g.reduce_sum(x[0], Some(1))?;
            g.add(a, s)
        }),
        case("equal_constant", vec![(t(&[4], r, -1.0, 1.0), true), (t(&[4], r, -1.0, 1.0), true)], |g, x| {
            let e = g.equal(x[0], x[1])?;
            g.add(e, x[1])
        }),
        case("ones_like", vec![(t(&[2, 3], r, -1.0, 1.0), true)], |g, x| {
            let o = g.ones_like(x[0])?;
            g.mul(o, x[0])
        }),
    ];
    for (name, combiner) in [("sum", Combiner::Sum), ("mean", Combiner::Mean), ("sqrtn", Combiner::Sqrtn)] {
        cases.push(case(
            &format!("embedding_combine_{name}"),
            vec![
                (t(&[6, 3], r, -1.0, 1.0), true),
                (ids(&[vec![0.0, 2.0, -1.0], vec![5.0, 5.0, 1.0], vec![-1.0, -1.0, -1.0]]), false),
            ],
            move |g, x| g.embedding_combine(x[0], x[1], combiner),
        ));
    }
    cases
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Unary(u8),
    Binary(u8),
    MatMul(usize),
    Reduce(usize),
    Concat,
}

/// A random chain of at most five ops over inputs with dims ≤ 4.
pub fn random_composite(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..=4);
    let cols = rng.gen_range(1..=4);
    let n_ops = rng.gen_range(1..=5);
    let mut inputs = vec![(t(&[rows, cols], &mut rng, -1.0, 1.0), true), (t(&[rows, cols], &mut rng, -1.0, 1.0), true)];
    let mut steps = Vec::new();
    let mut width = cols;
    for _ in 0..n_ops {
        let step = match rng.gen_range(0..5) {
            0 => Step::Unary(rng.gen_range(0..5)),
            1 => Step::Binary(rng.gen_range(0..3)),
            2 => {
                let k = rng.gen_range(1..=4);
                inputs.push((t(&[width, k], &mut rng, -1.0, 1.0), true));
                width = k;
                Step::MatMul(inputs.len() - 1)
            }
            3 => Step::Reduce(rng.gen_range(0..2)),
            _ => Step::Concat,
        };
        if let Step::Concat = step {
            width *= 2;
        }
        if let Step::Reduce(_) = step {
            width = 1;
        }
        steps.push(step);
    }
    let desc: Vec<String> = steps.iter().map(|s| format!("{s:?}")).collect();
    case(&format!("composite[{seed}] {}", desc.join(" ")), inputs, move |g, x| {
        let mut cur = x[0];
        // The second input re-enters through the binary ops, as a scalar
        // mean once the running width has changed.
        let other = x[1];
        for s in &steps {
            cur = match *s {
                Step::Unary(0) => g.tanh(cur)?,
                Step::Unary(1) => g.sigmoid(cur)?,
                Step::Unary(2) => g.softmax(cur)?,
                Step::Unary(3) => {
                    let c = g.scale(cur, 0.5)?;
                    g.exp(c)?
                }
                Step::Unary(_) => g.square(cur)?,
                Step::Binary(op) => {
                    let same = g.shape(cur) == g.shape(other);
                    let rhs = if same { other } else { g.reduce_mean(other, None)? };
                    match op {
                        0 => g.add(cur, rhs)?,
                        1 => g.sub(cur, rhs)?,
                        _ => g.mul(cur, rhs)?,
                    }
                }
                Step::MatMul(i) => g.matmul(cur, x[i])?,
                Step::Reduce(0) => {
                    let s = g.reduce_sum(cur, Some(1))?;
                    g.reshape(s, &[-1, 1])?
                }
                Step::Reduce(_) => {
                    let s = g.reduce_mean(cur, Some(1))?;
                    g.reshape(s, &[-1, 1])?
                }
                Step::Concat => {
                    let t = g.tanh(cur)?;
                    g.concat(&[cur, t], 1)?
                }
            };
        }
        Ok(cur)
    })
}

pub const COMPOSITE_GRAPHS: u64 = 200;

/// Every case with its error; the caller decides on pass/fail.
pub fn run_suite() -> Vec<(String, Result<f64>)> {
    primitive_cases()
        .into_iter()
        .chain((0..COMPOSITE_GRAPHS).map(random_composite))
        .map(|c| {
            let e = max_error(&c);
            (c.name, e)
        })
        .collect()
}
