use std::collections::HashMap;

use super::kernels::KernelCtx;
use super::{Graph, InputSource, NodeId, NodeKind, VarId};
use crate::error::{Error, Result};
use crate::hashing::mix;
use crate::input::InputBatch;
use crate::tensor::Tensor;

/// Executes fetches against a graph it owns.
///
/// Every run evaluates the pure ancestors of the fetches first (in node order)
/// and then the side-effecting ones, so all reads in one run observe the
/// variable values from before the run.
pub struct ExecutionContext {
    graph: Graph,
}

impl ExecutionContext {
    pub fn new(graph: Graph) -> Self {
        ExecutionContext { graph }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    pub fn run(&mut self, batch: Option<&InputBatch>, fetches: &[NodeId]) -> Result<Vec<Tensor>> {
        let g = &self.graph;
        for &f in fetches {
            g.check(f)?;
        }
        let needed = ancestors(g, fetches);
        let step = g.global_step_value();
        let mut values: Vec<Option<Tensor>> = vec![None; g.len()];
        let mut grad_cache: HashMap<NodeId, HashMap<VarId, Tensor>> = HashMap::new();

        for id in (0..g.len()).filter(|&i| needed[i]) {
            let node = &g.nodes[id];
            if node.kind.is_effect() {
                continue;
            }
            let out = match &node.kind {
                NodeKind::Constant(t) => t.clone(),
                NodeKind::Variable(v) => g.var_value(*v).clone(),
                NodeKind::Input(src) => {
                    let t = read_input(src, batch)?;
                    if !node.shape.accepts(t.shape()) {
                        return Err(Error::exec(format!(
                            "input {src_name} has shape {} but the graph expects {}",
                            t.shape(),
                            node.shape,
                            src_name = source_name(src)
                        )));
                    }
                    t
                }
                NodeKind::Primitive(p, inputs) => {
                    let args: Vec<&Tensor> = inputs
                        .iter()
                        .map(|i| values[i.0].as_ref().expect("inputs precede"))
                        .collect();
                    p.forward(&args, kernel_ctx(g, step, id))?
                }
                NodeKind::Gradient { loss, var } => {
                    if !grad_cache.contains_key(loss) {
                        let grads = backprop(g, *loss, &values, step)?;
                        grad_cache.insert(*loss, grads);
                    }
                    match grad_cache[loss].get(var) {
                        Some(t) => t.clone(),
                        None => Tensor::zeros(g.var_def(*var).shape.clone()),
                    }
                }
                _ => unreachable!("effects handled below"),
            };
            values[id] = Some(out);
        }

        for id in (0..g.len()).filter(|&i| needed[i]) {
            let kind = self.graph.nodes[id].kind.clone();
            if !kind.is_effect() {
                continue;
            }
            let out = match kind {
                NodeKind::ApplyUpdates {
                    updates,
                    increment_step,
                } => {
                    for u in &updates {
                        let grad = values[u.grad.0].as_ref().expect("pure pass");
                        let mut slot = u.slot.map(|s| self.graph.var_value(s).clone());
                        u.optimizer
                            .apply(self.graph.var_value_mut(u.var), grad, slot.as_mut())?;
                        if let (Some(s), Some(t)) = (u.slot, slot) {
                            *self.graph.var_value_mut(s) = t;
                        }
                    }
                    if increment_step {
                        let next = self.graph.global_step_value() + 1;
                        self.graph.set_global_step(next);
                    }
                    Tensor::scalar(self.graph.global_step_value() as f64)
                }
                NodeKind::Assign { var, value } => {
                    let v = values[value.0].clone().expect("pure pass");
                    self.graph.set_var_value(var, v)?;
                    Tensor::zeros(vec![0])
                }
                NodeKind::AssignAdd { var, value } => {
                    let v = values[value.0].as_ref().expect("pure pass");
                    let target = self.graph.var_value_mut(var);
                    if target.shape() != v.shape() {
                        return Err(Error::exec(format!(
                            "assign_add of {} into {}",
                            v.shape(),
                            target.shape()
                        )));
                    }
                    for (t, a) in target.data_mut().iter_mut().zip(v.data()) {
                        *t += a;
                    }
                    Tensor::zeros(vec![0])
                }
                NodeKind::Group(_) => Tensor::zeros(vec![0]),
                _ => unreachable!(),
            };
            values[id] = Some(out);
        }

        Ok(fetches
            .iter()
            .map(|f| values[f.0].clone().expect("fetched nodes are evaluated"))
            .collect())
    }

    /// Runs a single fetch.
    pub fn eval(&mut self, batch: Option<&InputBatch>, fetch: NodeId) -> Result<Tensor> {
        Ok(self.run(batch, &[fetch])?.remove(0))
    }
}

fn source_name(src: &InputSource) -> &str {
    match src {
        InputSource::Feature { name, .. } | InputSource::Label(name) => name,
    }
}

fn read_input(src: &InputSource, batch: Option<&InputBatch>) -> Result<Tensor> {
    match src {
        InputSource::Feature { name, convert } => {
            let batch = batch.ok_or_else(|| Error::MissingFeature(name.clone()))?;
            convert(batch)
        }
        InputSource::Label(name) => batch
            .and_then(|b| b.labels.get(name))
            .cloned()
            .ok_or_else(|| Error::MissingLabel(name.clone())),
    }
}

/// Dropout masks and other stochastic kernels depend on (seed, step, node) only,
/// so the backward pass and a resumed run see the same randomness.
fn kernel_ctx(g: &Graph, step: u64, id: usize) -> KernelCtx {
    KernelCtx {
        seed: mix(mix(g.seed(), step), id as u64),
    }
}

fn ancestors(g: &Graph, fetches: &[NodeId]) -> Vec<bool> {
    let mut seen = vec![false; g.len()];
    let mut stack: Vec<NodeId> = fetches.to_vec();
    while let Some(id) = stack.pop() {
        if std::mem::replace(&mut seen[id.0], true) {
            continue;
        }
        stack.extend(g.nodes[id.0].kind.deps());
    }
    seen
}

/// Reverse accumulation from `loss` over the forward values of this run.
fn backprop(
    g: &Graph,
    loss: NodeId,
    values: &[Option<Tensor>],
    step: u64,
) -> Result<HashMap<VarId, Tensor>> {
    let mut out = HashMap::new();
    if !g.nodes[loss.0].requires_grad {
        return Ok(out);
    }
    let loss_value = values[loss.0]
        .as_ref()
        .expect("loss evaluated before gradients");
    let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(Tensor::full(loss_value.shape().clone(), 1.0));
    for id in (0..=loss.0).rev() {
        let Some(grad) = grads[id].take() else {
            continue;
        };
        let node = &g.nodes[id];
        match &node.kind {
            NodeKind::Variable(v) => {
                out.insert(*v, grad);
            }
            NodeKind::Primitive(p, inputs) => {
                let args: Vec<&Tensor> = inputs
                    .iter()
                    .map(|i| values[i.0].as_ref().expect("ancestor of loss"))
                    .collect();
                let output = values[id].as_ref().expect("ancestor of loss");
                let input_grads = p.backward(&args, output, &grad, kernel_ctx(g, step, id))?;
                for (input, ig) in inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !g.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            _ => {}
        }
    }
    Ok(out)
}
