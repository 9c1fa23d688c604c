//! Build-then-execute computation graphs.
//!
//! A [`Graph`] is an append-only list of nodes; every node's inputs precede it,
//! so node ids are already a topological order. Variables live in the graph and
//! are read through dedicated nodes. Execution happens in
//! [`ExecutionContext`](session::ExecutionContext).

pub mod kernels;
mod ops;
pub mod session;
pub mod shape;
mod variables;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

pub use kernels::{Combiner, Primitive};
pub use session::ExecutionContext;
pub use shape::StaticShape;
pub use variables::{Collection, Initializer, Reuse, VarId, Variable, VariableDef};

use crate::error::{Error, Result};
use crate::input::InputBatch;
use crate::optimizer::Optimizer;
use crate::tensor::Tensor;

use variables::VariableStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node#{}", self.0)
    }
}

/// Host-side conversion of raw batch features into a tensor.
pub type HostFn = Arc<dyn Fn(&InputBatch) -> Result<Tensor> + Send + Sync>;

#[derive(Clone)]
pub enum InputSource {
    /// Raw features converted on the host (hashing, densifying, ...);
    /// `name` identifies the input in diagnostics.
    Feature {
        name: String,
        convert: HostFn,
    },
    Label(String),
}

/// One variable update inside a train op.
#[derive(Clone, Debug)]
pub struct Update {
    pub var: VarId,
    pub grad: NodeId,
    pub optimizer: Optimizer,
    pub slot: Option<VarId>,
}

#[derive(Clone)]
pub enum NodeKind {
    Constant(Tensor),
    Input(InputSource),
    Variable(VarId),
    Primitive(Primitive, Vec<NodeId>),
    /// d(loss)/d(var), computed by reverse accumulation in the same run.
    Gradient {
        loss: NodeId,
        var: VarId,
    },
    ApplyUpdates {
        updates: Vec<Update>,
        increment_step: bool,
    },
    Assign {
        var: VarId,
        value: NodeId,
    },
    AssignAdd {
        var: VarId,
        value: NodeId,
    },
    Group(Vec<NodeId>),
}

impl NodeKind {
    /// Nodes with side effects run after every pure node of the same run.
    pub fn is_effect(&self) -> bool {
        matches!(
            self,
            NodeKind::ApplyUpdates { .. }
                | NodeKind::Assign { .. }
                | NodeKind::AssignAdd { .. }
                | NodeKind::Group(_)
        )
    }

    pub(crate) fn deps(&self) -> Vec<NodeId> {
        match self {
            NodeKind::Constant(_) | NodeKind::Input(_) | NodeKind::Variable(_) => Vec::new(),
            NodeKind::Primitive(_, inputs) => inputs.clone(),
            NodeKind::Gradient { loss, .. } => vec![*loss],
            NodeKind::ApplyUpdates { updates, .. } => updates.iter().map(|u| u.grad).collect(),
            NodeKind::Assign { value, .. } | NodeKind::AssignAdd { value, .. } => vec![*value],
            NodeKind::Group(nodes) => nodes.clone(),
        }
    }
}

impl fmt::Debug for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Constant(t) => write!(f, "Constant({})", t.shape()),
            NodeKind::Input(InputSource::Feature { name, .. }) => write!(f, "Feature({name})"),
            NodeKind::Input(InputSource::Label(name)) => write!(f, "Label({name})"),
            NodeKind::Variable(v) => write!(f, "Variable({v:?})"),
            NodeKind::Primitive(p, inputs) => write!(f, "{}({inputs:?})", p.name()),
            NodeKind::Gradient { loss, var } => write!(f, "Gradient({loss}, {var:?})"),
            NodeKind::ApplyUpdates { updates, .. } => write!(f, "ApplyUpdates({})", updates.len()),
            NodeKind::Assign { var, value } => write!(f, "Assign({var:?}, {value})"),
            NodeKind::AssignAdd { var, value } => write!(f, "AssignAdd({var:?}, {value})"),
            NodeKind::Group(nodes) => write!(f, "Group({nodes:?})"),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub kind: NodeKind,
    pub shape: StaticShape,
    /// Whether any variable is upstream, i.e. gradients can flow into it.
    pub requires_grad: bool,
}

struct Scope {
    name: String,
    reuse: Option<Reuse>,
}

/// Dataflow graph plus the variables it owns.
pub struct Graph {
    nodes: Vec<Node>,
    vars: VariableStore,
    var_nodes: HashMap<VarId, NodeId>,
    scopes: Vec<Scope>,
    scope_counts: HashMap<String, usize>,
    global_step: VarId,
    seed: u64,
}

pub const GLOBAL_STEP: &str = "global_step";

impl Graph {
    pub fn new(seed: u64) -> Self {
        let mut g = Graph {
            nodes: Vec::new(),
            vars: VariableStore::default(),
            var_nodes: HashMap::new(),
            scopes: Vec::new(),
            scope_counts: HashMap::new(),
            global_step: VarId(0),
            seed,
        };
        g.global_step = g
            .vars
            .create(
                VariableDef {
                    name: GLOBAL_STEP.to_string(),
                    shape: crate::tensor::Shape::scalar(),
                    trainable: false,
                    collection: Collection::GlobalStep,
                },
                Tensor::scalar(0.0),
            )
            .expect("fresh store");
        g
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> &NodeKind {
        &self.nodes[id.0].kind
    }

    pub fn shape(&self, id: NodeId) -> &StaticShape {
        &self.nodes[id.0].shape
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::invalid(format!(
                "{id} does not belong to this graph"
            )));
        }
        Ok(())
    }

    fn push(&mut self, kind: NodeKind, shape: StaticShape) -> Result<NodeId> {
        let deps = kind.deps();
        for &d in &deps {
            self.check(d)?;
        }
        let requires_grad = match &kind {
            NodeKind::Variable(_) => true,
            NodeKind::Primitive(_, inputs) => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
            _ => false,
        };
        self.nodes.push(Node {
            kind,
            shape,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = StaticShape::from(value.shape());
        self.push(NodeKind::Constant(value), shape)
            .expect("no deps")
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Feature input converted on the host from the raw batch.
    pub fn feature_input(&mut self, name: &str, shape: StaticShape, convert: HostFn) -> NodeId {
        self.push(
            NodeKind::Input(InputSource::Feature {
                name: name.to_string(),
                convert,
            }),
            shape,
        )
        .expect("no deps")
    }

    pub fn label_input(&mut self, name: &str, shape: StaticShape) -> NodeId {
        self.push(NodeKind::Input(InputSource::Label(name.to_string())), shape)
            .expect("no deps")
    }

    /// Adds a primitive op after checking its static shapes.
    pub fn op(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
            if self.nodes[i.0].kind.is_effect() {
                return Err(Error::invalid(format!(
                    "{} cannot consume side-effect node {i}",
                    prim.name()
                )));
            }
        }
        let shapes: Vec<&StaticShape> = inputs.iter().map(|i| &self.nodes[i.0].shape).collect();
        let out = prim.infer(&shapes)?;
        self.push(NodeKind::Primitive(prim, inputs.to_vec()), out)
    }

    /// Gradient nodes of a scalar loss with respect to each variable.
    pub fn gradients(&mut self, loss: NodeId, wrt: &[VarId]) -> Result<Vec<NodeId>> {
        self.check(loss)?;
        let shape = self.shape(loss);
        if shape.rank() != 0 {
            return Err(Error::NonScalarLoss(shape.dims().to_vec()));
        }
        wrt.iter()
            .map(|&var| {
                let vshape = StaticShape::from(&self.vars.def(var).shape);
                self.push(NodeKind::Gradient { loss, var }, vshape)
            })
            .collect()
    }

    pub(crate) fn apply_updates(
        &mut self,
        updates: Vec<Update>,
        increment_step: bool,
    ) -> Result<NodeId> {
        for u in &updates {
            let grad_shape = self.shape(u.grad).clone();
            let var_shape = StaticShape::from(&self.vars.def(u.var).shape);
            if !grad_shape.compatible(&var_shape) {
                return Err(Error::shape(
                    "apply_updates",
                    var_shape.dims(),
                    grad_shape.dims(),
                ));
            }
        }
        self.push(
            NodeKind::ApplyUpdates {
                updates,
                increment_step,
            },
            StaticShape::scalar(),
        )
    }

    pub fn assign(&mut self, var: VarId, value: NodeId) -> Result<NodeId> {
        self.check_assign("assign", var, value)?;
        self.push(NodeKind::Assign { var, value }, StaticShape::known(&[0]))
    }

    pub fn assign_add(&mut self, var: VarId, value: NodeId) -> Result<NodeId> {
        self.check_assign("assign_add", var, value)?;
        self.push(NodeKind::AssignAdd { var, value }, StaticShape::known(&[0]))
    }

    fn check_assign(&self, op: &'static str, var: VarId, value: NodeId) -> Result<()> {
        self.check(value)?;
        let vshape = StaticShape::from(&self.vars.def(var).shape);
        if !self.shape(value).compatible(&vshape) {
            return Err(Error::shape(op, vshape.dims(), self.shape(value).dims()));
        }
        Ok(())
    }

    /// Runs all members; produces no value.
    pub fn group(&mut self, nodes: &[NodeId]) -> Result<NodeId> {
        self.push(NodeKind::Group(nodes.to_vec()), StaticShape::known(&[0]))
    }

    /// Collects the variable updates reachable through groups from `op`.
    pub fn updates_of(&self, op: NodeId) -> Vec<(Update, bool)> {
        let mut out = Vec::new();
        let mut stack = vec![op];
        while let Some(id) = stack.pop() {
            match &self.nodes[id.0].kind {
                NodeKind::ApplyUpdates {
                    updates,
                    increment_step,
                } => {
                    for (i, u) in updates.iter().enumerate() {
                        out.push((u.clone(), *increment_step && i == 0));
                    }
                }
                NodeKind::Group(nodes) => stack.extend(nodes.iter().rev()),
                _ => {}
            }
        }
        out
    }

    // ---- variables ----

    pub fn global_step(&self) -> VarId {
        self.global_step
    }

    pub fn global_step_value(&self) -> u64 {
        self.vars.value(self.global_step).data()[0] as u64
    }

    pub fn set_global_step(&mut self, step: u64) {
        self.vars.value_mut(self.global_step).data_mut()[0] = step as f64;
    }

    /// Current scope prefix, e.g. "dnn/hiddenlayer_0".
    pub fn scope_name(&self) -> String {
        self.scopes
            .iter()
            .map(|s| s.name.as_str())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn scoped(&self, name: &str) -> String {
        let prefix = self.scope_name();
        if prefix.is_empty() {
            name.to_string()
        } else {
            format!("{prefix}/{name}")
        }
    }

    /// Runs `f` with `name` pushed onto the variable scope. `reuse` overrides
    /// the reuse policy for `get_variable` calls inside.
    pub fn variable_scope<T>(
        &mut self,
        name: &str,
        reuse: Option<Reuse>,
        f: impl FnOnce(&mut Graph) -> Result<T>,
    ) -> Result<T> {
        if name.is_empty() || name.contains('/') {
            return Err(Error::invalid(format!("bad scope name {name:?}")));
        }
        let inherited = self.scopes.last().and_then(|s| s.reuse);
        self.scopes.push(Scope {
            name: name.to_string(),
            reuse: reuse.or(inherited),
        });
        let out = f(self);
        self.scopes.pop();
        out
    }

    /// Runs `f` at the root scope.
    pub fn root_scope<T>(&mut self, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
        let saved = std::mem::take(&mut self.scopes);
        let out = f(self);
        self.scopes = saved;
        out
    }

    /// Scope name not yet used under the current scope: "dense", "dense_1", ...
    pub fn unique_scope(&mut self, base: &str) -> String {
        let key = self.scoped(base);
        let count = self.scope_counts.entry(key).or_insert(0);
        let name = if *count == 0 {
            base.to_string()
        } else {
            format!("{base}_{count}")
        };
        *count += 1;
        name
    }

    /// Creates or reuses a trainable model variable under the current scope.
    pub fn get_variable(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Initializer,
    ) -> Result<Variable> {
        self.get_variable_with(name, shape, init, None, true, Collection::Model)
    }

    pub fn get_variable_with(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Initializer,
        reuse: Option<Reuse>,
        trainable: bool,
        collection: Collection,
    ) -> Result<Variable> {
        let full = self.scoped(name);
        let reuse = reuse
            .or_else(|| self.scopes.last().and_then(|s| s.reuse))
            .unwrap_or(Reuse::No);
        let existing = self.vars.lookup(&full);
        let id = match (existing, reuse) {
            (Some(id), Reuse::Yes | Reuse::Auto) => {
                let have = self.vars.def(id).shape.dims();
                if have != shape {
                    return Err(Error::VariableShapeConflict {
                        name: full,
                        existing: have.to_vec(),
                        requested: shape.to_vec(),
                    });
                }
                id
            }
            (Some(_), Reuse::No) => return Err(Error::VariableExists(full)),
            (None, Reuse::Yes) => return Err(Error::VariableNotFound(full)),
            (None, Reuse::No | Reuse::Auto) => {
                let value = init.materialize(shape, self.seed, &full)?;
                self.vars.create(
                    VariableDef {
                        name: full,
                        shape: shape.to_vec().into(),
                        trainable,
                        collection,
                    },
                    value,
                )?
            }
        };
        Ok(Variable {
            id,
            node: self.read(id),
        })
    }

    /// The read node of a variable (one per variable).
    pub fn read(&mut self, var: VarId) -> NodeId {
        if let Some(&n) = self.var_nodes.get(&var) {
            return n;
        }
        let shape = StaticShape::from(&self.vars.def(var).shape);
        let n = self.push(NodeKind::Variable(var), shape).expect("no deps");
        self.var_nodes.insert(var, n);
        n
    }

    pub fn variable_by_name(&self, name: &str) -> Option<VarId> {
        self.vars.lookup(name)
    }

    pub fn var_def(&self, var: VarId) -> &VariableDef {
        self.vars.def(var)
    }

    pub fn var_value(&self, var: VarId) -> &Tensor {
        self.vars.value(var)
    }

    pub fn set_var_value(&mut self, var: VarId, value: Tensor) -> Result<()> {
        let def = self.vars.def(var);
        if value.shape() != &def.shape {
            return Err(Error::shape(
                "set_var_value",
                StaticShape::from(&def.shape).dims(),
                StaticShape::from(value.shape()).dims(),
            ));
        }
        *self.vars.value_mut(var) = value;
        Ok(())
    }

    pub(crate) fn var_value_mut(&mut self, var: VarId) -> &mut Tensor {
        self.vars.value_mut(var)
    }

    /// All variables in creation order.
    pub fn variables(&self) -> Vec<VarId> {
        self.vars.ids()
    }

    pub fn trainable_variables(&self) -> Vec<VarId> {
        self.vars
            .ids()
            .into_iter()
            .filter(|&v| self.vars.def(v).trainable)
            .collect()
    }

    /// Name → value snapshot of every variable, in creation order.
    pub fn snapshot(&self) -> Vec<(VariableDef, Tensor)> {
        self.vars
            .ids()
            .into_iter()
            .map(|v| (self.vars.def(v).clone(), self.vars.value(v).clone()))
            .collect()
    }

    pub fn snapshot_map(&self) -> BTreeMap<String, Tensor> {
        self.snapshot()
            .into_iter()
            .map(|(d, t)| (d.name, t))
            .collect()
    }
}
