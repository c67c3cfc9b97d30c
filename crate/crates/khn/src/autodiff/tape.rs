use std::cell::RefCell;
use std::collections::HashMap;

use super::Tensor;
use crate::{Error, Result};

/// Per-input gradient contributions given the output's adjoint.
///
/// `None` marks an input the operation is not differentiable in.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
    pub backward: BackwardFn,
}

/// Records differentiable operations in execution order.
///
/// Nodes are appended as ops run, so inputs always precede their consumers
/// and one reverse sweep visits each node exactly once. A tape is confined
/// to a single execution stream; independent episodes use independent tapes.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Validates and registers an op result. Ops whose inputs are all
    /// constant are not recorded; their outputs are constants too.
    pub(crate) fn push(
        &self,
        op: &'static str,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{op} produced non-finite value {v}")));
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::from_parts(shape, data, requires_grad);
        if requires_grad {
            self.nodes.borrow_mut().push(Node {
                inputs: inputs.iter().map(|&t| t.clone()).collect(),
                output: out.clone(),
                backward,
            });
        }
        Ok(out)
    }
}

/// Propagates gradients from a scalar loss back through the tape.
///
/// Every `requires_grad` tensor reachable from `loss` has its `grad` buffer
/// incremented by the freshly computed adjoint; repeated calls without
/// `zero_grad` therefore accumulate.
pub fn backward(loss: &Tensor, tape: &Tape) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Shape(format!(
            "backward() needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }

    // Pass-local adjoints keyed by tensor identity. Keeping them separate
    // from the persistent grad buffers is what makes accumulation linear.
    let mut adjoint: HashMap<u64, Vec<f64>> = HashMap::new();
    adjoint.insert(loss.id(), vec![1.0]);

    let nodes = tape.nodes.borrow();
    for node in nodes.iter().rev() {
        let Some(out_adj) = adjoint.get(&node.output.id()).cloned() else {
            continue;
        };
        let contribs = (node.backward)(&out_adj);
        debug_assert_eq!(contribs.len(), node.inputs.len());
        for (input, contrib) in node.inputs.iter().zip(contribs) {
            let Some(contrib) = contrib else { continue };
            debug_assert_eq!(contrib.len(), input.numel());
            match adjoint.entry(input.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, c) in e.get_mut().iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(contrib);
                }
            }
        }
    }

    // Flush adjoints into grad buffers, visiting each tensor once in a
    // deterministic (tape) order.
    let mut applied: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut apply = |t: &Tensor| {
        if t.requires_grad() && applied.insert(t.id()) {
            if let Some(adj) = adjoint.get(&t.id()) {
                t.accumulate_grad(adj);
            }
        }
    };
    apply(loss);
    for node in nodes.iter() {
        apply(&node.output);
        for input in &node.inputs {
            apply(input);
        }
    }
    Ok(())
}
