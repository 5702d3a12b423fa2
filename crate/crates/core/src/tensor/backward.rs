//! Reverse sweep: topologically order the graph below a root, then visit in
//! reverse, letting each op scatter its output gradient onto its inputs.

use std::collections::HashSet;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Topologically ordered list of graph nodes (inputs before consumers).
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Iterative post-order DFS from `root`; recursion would overflow the
    /// stack on long chains such as unrolled recurrences.
    pub fn record(root: &Tensor<T>) -> Self {
        let mut nodes = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // stack of (tensor, children_pushed)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            let children: Vec<Tensor<T>> = t
                .op()
                .map(|op| op.inputs().into_iter().cloned().collect())
                .unwrap_or_default();
            stack.push((t, true));
            for child in children {
                if child.op().is_some() && !visited.contains(&child.id()) {
                    stack.push((child, false));
                }
            }
        }
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Accumulate dSelf/dLeaf into every reachable `requires_grad` leaf.
    /// `self` must be a single-element tensor. Gradients add onto whatever
    /// is already stored; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        self.accumulate_grad(vec![T::one()]);
        let tape = Tape::record(self);
        for node in tape.nodes.iter().rev() {
            if let Some(op) = node.op() {
                op.backward(node);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_orders_inputs_before_consumers() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.square().unwrap();
        let c = b.add(&a).unwrap();
        let loss = c.sum_all().unwrap();
        let tape = Tape::record(&loss);
        // b, c, loss are interior nodes; a is a leaf and not recorded
        assert_eq!(tape.len(), 3);
        // last node must be the root
        assert_eq!(tape.nodes.last().unwrap().id(), loss.id());
    }

    #[test]
    fn diamond_graph_counts_both_paths() {
        // loss = sum(x*x + x) => d/dx = 2x + 1
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let loss = x.square().unwrap().add(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.square().unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn reused_node_gets_full_gradient_before_propagating() {
        // y = x^2, loss = sum(y * y) => dL/dx = 4 x^3
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let y = x.square().unwrap();
        let loss = y.mul(&y).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![32.0]);
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        for _ in 0..2 {
            let loss = x.square().unwrap().sum_all().unwrap();
            loss.backward().unwrap();
        }
        assert_eq!(x.grad_vec().unwrap(), vec![4.0]);
        x.zero_grad();
        let loss = x.square().unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0]);
    }

    #[test]
    fn constant_subgraphs_get_no_gradient() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let c = Tensor::<f64>::from_vec(vec![5.0], &[1]).unwrap();
        let loss = x.mul(&c).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![5.0]);
        assert!(c.grad_vec().is_none());
    }

    #[test]
    fn no_grad_blocks_recording() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let y = super::super::no_grad(|| x.square().unwrap());
        assert!(!y.requires_grad());
        assert!(y.op().is_none());
    }
}
