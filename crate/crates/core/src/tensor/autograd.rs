use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar loss, keyed by tensor identity.
///
/// Holds entries for every differentiable tensor reachable from the loss,
/// intermediates included.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    /// Gradient for `t`, or `None` when the loss does not depend on it.
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient for `t`, zero-filled when disconnected.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f32> {
        self.get(t).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Mark {
    Open,
    Done,
}

pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.len() != 1 {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    let order = topo_order(loss)?;
    let mut grads = Gradients::default();
    if !loss.requires_grad() {
        return Ok(grads);
    }
    grads.map.insert(loss.id(), vec![1.0]);

    for t in order.iter().rev() {
        let Some(node) = t.node() else { continue };
        let input_grads = match grads.map.get(&t.id()) {
            Some(g_out) => (node.backward)(g_out),
            // nothing flowed into this node
            None => continue,
        };
        debug_assert_eq!(input_grads.len(), node.inputs.len());
        for (input, g) in node.inputs.iter().zip(input_grads) {
            let Some(g) = g else { continue };
            if !input.requires_grad() {
                continue;
            }
            debug_assert_eq!(g.len(), input.len(), "{} grad length", node.op);
            match grads.map.get_mut(&input.id()) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    grads.map.insert(input.id(), g);
                }
            }
        }
    }
    Ok(grads)
}

/// Post-order over the graph; inputs before consumers.
fn topo_order(root: &Tensor) -> Result<Vec<Tensor>> {
    let mut marks: HashMap<u64, Mark> = HashMap::new();
    let mut order = Vec::new();
    // (tensor, next input index to visit)
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    marks.insert(root.id(), Mark::Open);
    while let Some((t, idx)) = stack.pop() {
        let inputs = t.node().map_or(&[][..], |n| n.inputs.as_slice());
        if idx < inputs.len() {
            let child = inputs[idx].clone();
            stack.push((t, idx + 1));
            if !child.requires_grad() {
                continue;
            }
            match marks.get(&child.id()) {
                Some(Mark::Open) => return Err(Error::GraphCycle),
                Some(Mark::Done) => {}
                None => {
                    marks.insert(child.id(), Mark::Open);
                    stack.push((child, 0));
                }
            }
        } else {
            marks.insert(t.id(), Mark::Done);
            order.push(t);
        }
    }
    Ok(order)
}
