use crate::diffcore::graph::{Gradients, Graph, Var};
use crate::diffcore::tensor::Tensor4;
use crate::error::Result;

/// A named tensor owned by a model.
///
/// Non-trainable parameters (batch-norm running statistics) are persisted
/// with the model but never bound for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor4,
    pub trainable: bool,
    /// Accumulated gradient; cleared by the optimizer after each step.
    pub grad: Option<Tensor4>,
}

impl Parameter {
    pub fn new(id: impl Into<String>, tensor: Tensor4, trainable: bool) -> Self {
        Parameter {
            id: id.into(),
            tensor,
            trainable,
            grad: None,
        }
    }

    /// Records the parameter on `graph`. Gradients are tracked only when the
    /// parameter is trainable and `track` is set.
    pub fn bind(&self, graph: &mut Graph, track: bool) -> Var {
        graph.leaf(self.tensor.clone(), track && self.trainable)
    }

    /// Adds the gradient of `var` (if any) into the accumulator.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) -> Result<()> {
        if let Some(g) = grads.get(var) {
            match &mut self.grad {
                Some(acc) => acc.add_assign(g)?,
                None => self.grad = Some(g.clone()),
            }
        }
        Ok(())
    }
}
