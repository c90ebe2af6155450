use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, Op};
use crate::params::ParamSet;
use crate::tensor::{Shape, Tensor};

/// An input as remembered by a tape node: value plus, if the input was itself
/// recorded, the id of the node that produced it.
#[derive(Clone)]
pub(crate) struct Saved {
    pub shape: Shape,
    pub data: Rc<[f64]>,
    pub node: Option<usize>,
}

#[derive(Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Saved>,
    pub out_shape: Shape,
    pub out_data: Rc<[f64]>,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// While > 0, derived operations are not recorded (plain-value backward).
    paused: usize,
    /// Number of backward sweeps currently running on this tape.
    depth: usize,
}

/// An append-only record of operations in execution (topological) order.
///
/// Backward sweeps replay the record in reverse. With `create_graph` the
/// sweep's own operations are recorded onto the same tape, so gradients are
/// themselves differentiable (gradients of gradients).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Back-pointer from a tensor to the tape node that produced it.
#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                paused: 0,
                depth: 0,
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of backward sweeps currently running (0 outside of `grad`).
    pub fn nesting_depth(&self) -> usize {
        self.inner.borrow().depth
    }

    /// Registers a tensor as a differentiable leaf and returns the recorded
    /// copy. Gradients are only collected for leaves created this way (or for
    /// recorded intermediates passed explicitly to `grad`).
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push_node(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out_shape: t.shape().clone(),
            out_data: t.data_rc(),
        });
        Tensor::from_parts(
            t.shape().clone(),
            t.data_rc(),
            Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        )
    }

    /// Watches every entry of a parameter set, preserving names and order.
    pub fn watch_params(&self, params: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in params.iter() {
            out.insert(name, self.watch(t))
                .expect("source set has unique names");
        }
        out
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn is_recording(&self) -> bool {
        self.inner.borrow().paused == 0
    }

    pub(crate) fn push_node(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn node_view(&self, id: usize) -> Node {
        self.inner.borrow().nodes[id].clone()
    }
}

/// Pauses recording (for plain-value sweeps) and tracks sweep depth, restoring
/// both even if the sweep errors out.
struct SweepGuard {
    tape: Tape,
    paused: bool,
}

impl SweepGuard {
    fn begin(tape: &Tape, pause: bool) -> SweepGuard {
        let mut inner = tape.inner.borrow_mut();
        if pause {
            inner.paused += 1;
        }
        inner.depth += 1;
        drop(inner);
        SweepGuard {
            tape: tape.clone(),
            paused: pause,
        }
    }
}

impl Drop for SweepGuard {
    fn drop(&mut self) {
        let mut inner = self.tape.inner.borrow_mut();
        if self.paused {
            inner.paused -= 1;
        }
        inner.depth -= 1;
    }
}

/// Gradients of a scalar `loss` with respect to each tensor in `targets`.
///
/// Targets that the loss does not reach (or that were never recorded) get a
/// zero gradient of their own shape. With `create_graph` the sweep records its
/// operations, so returned gradients can be differentiated again; without it
/// the sweep produces plain values.
pub fn grad_tensors(loss: &Tensor, targets: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            got: loss.shape().clone(),
        });
    }
    let zeros = |targets: &[&Tensor]| {
        targets
            .iter()
            .map(|t| Tensor::zeros(t.dims()))
            .collect::<Result<Vec<_>>>()
    };
    let Some(loss_ref) = loss.node.clone() else {
        return zeros(targets);
    };
    let tape = loss_ref.tape.clone();
    let loss_id = loss_ref.id;

    let target_ids: Vec<Option<usize>> = targets
        .iter()
        .map(|t| {
            t.node
                .as_ref()
                .filter(|r| r.tape.same_tape(&tape) && r.id <= loss_id)
                .map(|r| r.id)
        })
        .collect();
    let id_set: HashSet<usize> = target_ids.iter().flatten().copied().collect();
    if id_set.is_empty() {
        return zeros(targets);
    }

    // Forward pass over node ids: which nodes can influence some target's
    // gradient path. Nodes outside this set are skipped entirely, so e.g.
    // asking only for head-parameter gradients never differentiates the
    // backbone.
    let needs: Vec<bool> = {
        let inner = tape.inner.borrow();
        let mut needs = vec![false; loss_id + 1];
        for (i, need) in needs.iter_mut().enumerate() {
            *need = id_set.contains(&i);
        }
        for i in 0..=loss_id {
            if !needs[i] {
                needs[i] = inner.nodes[i]
                    .inputs
                    .iter()
                    .any(|s| s.node.map_or(false, |j| needs[j]));
            }
        }
        needs
    };
    if !needs[loss_id] {
        return zeros(targets);
    }

    let _guard = SweepGuard::begin(&tape, !create_graph);
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    grads.insert(loss_id, Tensor::full(loss.dims(), 1.0)?);

    for i in (0..=loss_id).rev() {
        if !needs[i] {
            continue;
        }
        let Some(upstream) = grads.get(&i).cloned() else {
            continue;
        };
        if !id_set.contains(&i) {
            grads.remove(&i);
        }
        let node = tape.node_view(i);
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let inputs: Vec<Tensor> = node
            .inputs
            .iter()
            .map(|s| {
                Tensor::from_parts(
                    s.shape.clone(),
                    Rc::clone(&s.data),
                    s.node.map(|id| NodeRef {
                        tape: tape.clone(),
                        id,
                    }),
                )
            })
            .collect();
        let output = Tensor::from_parts(
            node.out_shape.clone(),
            Rc::clone(&node.out_data),
            Some(NodeRef {
                tape: tape.clone(),
                id: i,
            }),
        );
        let contributions = ops::vjp(&node.op, &inputs, &output, &upstream)?;
        for (slot, contribution) in contributions.into_iter().enumerate() {
            let Some(g) = contribution else { continue };
            let Some(j) = node.inputs[slot].node else {
                continue;
            };
            if !needs[j] {
                continue;
            }
            let merged = match grads.remove(&j) {
                Some(prev) => ops::add(&prev, &g)?,
                None => g,
            };
            grads.insert(j, merged);
        }
    }

    target_ids
        .iter()
        .zip(targets)
        .map(|(id, t)| match id.and_then(|id| grads.get(&id)) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(t.dims()),
        })
        .collect()
}

/// Gradients of a scalar loss for every parameter in `params`, keyed and
/// ordered exactly like `params`.
pub fn grad(loss: &Tensor, params: &ParamSet, create_graph: bool) -> Result<ParamSet> {
    let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
    let gs = grad_tensors(loss, &refs, create_graph)?;
    let mut out = ParamSet::new();
    for ((name, _), g) in params.iter().zip(gs) {
        out.insert(name, g).expect("source set has unique names");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn grad_of_square_at_three_is_six() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(3.0).unwrap());
        let y = ops::mul(&x, &x).unwrap();
        let g = grad_tensors(&y, &[&x], false).unwrap();
        assert_eq!(g[0].item().unwrap(), 6.0);
    }

    #[test]
    fn grad_of_mean_spreads_evenly() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = ops::mean(&x).unwrap();
        let g = grad_tensors(&y, &[&x], false).unwrap();
        assert_eq!(g[0].data(), &[0.25; 4]);
    }

    #[test]
    fn unreachable_target_gets_zero() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(3.0).unwrap());
        let z = tape.watch(&Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let y = ops::mul(&x, &x).unwrap();
        let g = grad_tensors(&y, &[&z], false).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[0].dims(), &[2]);
    }

    #[test]
    fn off_tape_loss_gives_zeros() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(3.0).unwrap());
        let c = Tensor::scalar(5.0).unwrap();
        let g = grad_tensors(&c, &[&x], false).unwrap();
        assert_eq!(g[0].item().unwrap(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = ops::relu(&x).unwrap();
        let err = grad_tensors(&y, &[&x], false).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn value_sweep_records_nothing() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(2.0).unwrap());
        let y = ops::mul(&x, &x).unwrap();
        let before = tape.len();
        grad_tensors(&y, &[&x], false).unwrap();
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn graph_sweep_appends_nodes_and_restores_depth() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(2.0).unwrap());
        let y = ops::mul(&x, &x).unwrap();
        let before = tape.len();
        let g = grad_tensors(&y, &[&x], true).unwrap();
        assert!(tape.len() > before);
        assert!(g[0].is_on_tape());
        assert_eq!(tape.nesting_depth(), 0);
    }

    #[test]
    fn grad_of_grad_of_cube() {
        // y = x^3 at x = 2: dy/dx = 3x^2 = 12, d2y/dx2 = 6x = 12.
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(2.0).unwrap());
        let y = ops::mul(&ops::mul(&x, &x).unwrap(), &x).unwrap();
        let g = grad_tensors(&y, &[&x], true).unwrap();
        assert_eq!(g[0].item().unwrap(), 12.0);
        let gg = grad_tensors(&g[0], &[&x], false).unwrap();
        assert_eq!(gg[0].item().unwrap(), 12.0);
    }

    #[test]
    fn duplicate_target_reported_per_slot() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(3.0).unwrap());
        let y = ops::mul(&x, &x).unwrap();
        let g = grad_tensors(&y, &[&x, &x], false).unwrap();
        assert_eq!(g[0].item().unwrap(), 6.0);
        assert_eq!(g[1].item().unwrap(), 6.0);
    }
}
