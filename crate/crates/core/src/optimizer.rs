//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Collection, Graph, Initializer, NodeId, Reuse, Update, VarId};
use crate::tensor::Tensor;

pub const ADAGRAD_EPSILON: f64 = 1e-8;
pub const ADAGRAD_INITIAL_ACCUMULATOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
    },
    Adagrad {
        learning_rate: f64,
        #[serde(default = "default_initial_accumulator")]
        initial_accumulator: f64,
    },
}

fn default_initial_accumulator() -> f64 {
    ADAGRAD_INITIAL_ACCUMULATOR
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer::Sgd { learning_rate }
    }

    pub fn adagrad(learning_rate: f64) -> Self {
        Optimizer::Adagrad {
            learning_rate,
            initial_accumulator: ADAGRAD_INITIAL_ACCUMULATOR,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd { learning_rate } | Optimizer::Adagrad { learning_rate, .. } => {
                *learning_rate
            }
        }
    }

    fn slot_name(&self) -> Option<&'static str> {
        match self {
            Optimizer::Sgd { .. } => None,
            Optimizer::Adagrad { .. } => Some("Adagrad"),
        }
    }

    /// Applies one update in place. `slot` carries the Adagrad accumulator.
    pub fn apply(&self, var: &mut Tensor, grad: &Tensor, slot: Option<&mut Tensor>) -> Result<()> {
        if var.shape() != grad.shape() {
            return Err(Error::exec(format!(
                "gradient shape {} does not match variable shape {}",
                grad.shape(),
                var.shape()
            )));
        }
        match self {
            Optimizer::Sgd { learning_rate } => {
                for (v, g) in var.data_mut().iter_mut().zip(grad.data()) {
                    *v -= learning_rate * g;
                }
            }
            Optimizer::Adagrad { learning_rate, .. } => {
                let acc = slot.ok_or_else(|| Error::exec("adagrad update without accumulator"))?;
                for ((v, a), g) in var
                    .data_mut()
                    .iter_mut()
                    .zip(acc.data_mut())
                    .zip(grad.data())
                {
                    *a += g * g;
                    *v -= learning_rate * g / (a.sqrt() + ADAGRAD_EPSILON);
                }
            }
        }
        Ok(())
    }

    /// Train op over every trainable variable; increments global_step.
    pub fn minimize(&self, g: &mut Graph, loss: NodeId) -> Result<NodeId> {
        let vars = g.trainable_variables();
        self.minimize_vars(g, loss, &vars, true)
    }

    /// Train op over `vars` only. Several of these can be grouped into one
    /// train op as long as exactly one increments the step.
    pub fn minimize_vars(
        &self,
        g: &mut Graph,
        loss: NodeId,
        vars: &[VarId],
        increment_step: bool,
    ) -> Result<NodeId> {
        let grads = g.gradients(loss, vars)?;
        let mut updates = Vec::with_capacity(vars.len());
        for (&var, grad) in vars.iter().zip(grads) {
            let slot = match self.slot_name() {
                None => None,
                Some(suffix) => {
                    let def = g.var_def(var).clone();
                    let init = match self {
                        Optimizer::Adagrad {
                            initial_accumulator,
                            ..
                        } => Initializer::Constant(*initial_accumulator),
                        Optimizer::Sgd { .. } => Initializer::Zeros,
                    };
                    // Slots are named after the absolute variable name, so
                    // they are created outside any active scope.
                    let slot = g.root_scope(|g| {
                        g.get_variable_with(
                            &format!("{}/{suffix}", def.name),
                            def.shape.dims(),
                            init,
                            Some(Reuse::No),
                            false,
                            Collection::Slot,
                        )
                    })?;
                    Some(slot.id)
                }
            };
            updates.push(Update {
                var,
                grad,
                optimizer: self.clone(),
                slot,
            });
        }
        g.apply_updates(updates, increment_step)
    }
}
