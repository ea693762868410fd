//! Reverse pass over the tape.

use crate::error::AdError;
use crate::graph::{Graph, Op, Tensor};
use crate::kernels;
use crate::param::ParamId;
use crate::scalar::Scalar;
use crate::shape::numel;
use crate::Result;

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a tensor, if it participated.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.slots.get(t.id()).and_then(|s| s.as_deref())
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Vec<T>> {
        self.slots.get_mut(id).and_then(|s| s.take())
    }
}

impl<T: Scalar> Graph<T> {
    /// Run the reverse pass from a scalar loss. The graph stays usable;
    /// repeated calls recompute gradients from scratch.
    ///
    /// Detached parameters (never touched by the loss) simply receive zero
    /// gradients from [`Gradients::param_grads`]; a non-scalar loss is a
    /// contract violation.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(AdError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        if loss.id() >= n {
            return Err(AdError::contract("backward", "loss from another graph"));
        }
        let mut slots: Vec<Option<Vec<T>>> = vec![None; n];
        slots[loss.id()] = Some(vec![T::one()]);

        for id in (0..=loss.id()).rev() {
            let node = &inner.nodes[id];
            if !node.needs_grad {
                continue;
            }
            // Leaves keep their accumulated gradient for wrt()/param_grads.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = slots[id].take() else { continue };

            // Allocate slots for inputs that need grads.
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| inner.nodes[i].needs_grad)
                .collect();
            for (&i, &ng) in node.inputs.iter().zip(&needs) {
                if ng && slots[i].is_none() {
                    slots[i] = Some(vec![T::zero(); numel(&inner.nodes[i].shape)]);
                }
            }

            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Unary(kind) => {
                    if needs[0] {
                        let x = &inner.nodes[node.inputs[0]].value;
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        kernels::unary_backward(*kind, x, &node.value, &gy, gx);
                    }
                }
                Op::AddScalar(_) => {
                    if needs[0] {
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        for (g, &v) in gx.iter_mut().zip(&gy) {
                            *g += v;
                        }
                    }
                }
                Op::Scale(c) => {
                    if needs[0] {
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        for (g, &v) in gx.iter_mut().zip(&gy) {
                            *g += v * *c;
                        }
                    }
                }
                Op::ClampMin(c) => {
                    if needs[0] {
                        let x = &inner.nodes[node.inputs[0]].value;
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        for i in 0..gy.len() {
                            if x[i] > *c {
                                gx[i] += gy[i];
                            }
                        }
                    }
                }
                Op::Binary(kind) => {
                    let (ia, ib) = (node.inputs[0], node.inputs[1]);
                    let a = std::rc::Rc::clone(&inner.nodes[ia].value);
                    let b = std::rc::Rc::clone(&inner.nodes[ib].value);
                    let a_shape = inner.nodes[ia].shape.clone();
                    let b_shape = inner.nodes[ib].shape.clone();
                    if ia == ib {
                        // same tensor on both sides: accumulate into one slot
                        if needs[0] {
                            let ga = slots[ia].as_mut().unwrap();
                            kernels::binary_backward(
                                *kind, &a, &a_shape, &b, &b_shape, &node.shape, &gy,
                                Some(ga), None,
                            );
                            let ga = slots[ia].as_mut().unwrap();
                            kernels::binary_backward(
                                *kind, &a, &a_shape, &b, &b_shape, &node.shape, &gy,
                                None, Some(ga),
                            );
                        }
                    } else {
                        let (left, right) = split_two(&mut slots, ia, ib);
                        kernels::binary_backward(
                            *kind,
                            &a,
                            &a_shape,
                            &b,
                            &b_shape,
                            &node.shape,
                            &gy,
                            if needs[0] { left.map(|v| v.as_mut_slice()) } else { None },
                            if needs[1] { right.map(|v| v.as_mut_slice()) } else { None },
                        );
                    }
                }
                Op::Bmm { batch, m, k, n } => {
                    let (ia, ib) = (node.inputs[0], node.inputs[1]);
                    let a = std::rc::Rc::clone(&inner.nodes[ia].value);
                    let b = std::rc::Rc::clone(&inner.nodes[ib].value);
                    if ia == ib {
                        if needs[0] {
                            let ga = slots[ia].as_mut().unwrap();
                            kernels::bmm_backward(&a, &b, &gy, *batch, *m, *k, *n, Some(ga), None);
                            let ga = slots[ia].as_mut().unwrap();
                            kernels::bmm_backward(&a, &b, &gy, *batch, *m, *k, *n, None, Some(ga));
                        }
                    } else {
                        let (left, right) = split_two(&mut slots, ia, ib);
                        kernels::bmm_backward(
                            &a,
                            &b,
                            &gy,
                            *batch,
                            *m,
                            *k,
                            *n,
                            if needs[0] { left.map(|v| v.as_mut_slice()) } else { None },
                            if needs[1] { right.map(|v| v.as_mut_slice()) } else { None },
                        );
                    }
                }
                Op::SoftmaxLast => {
                    if needs[0] {
                        let row = *node.shape.last().unwrap();
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        kernels::softmax_last_backward(&node.value, &gy, row, gx);
                    }
                }
                Op::LayerNormLast { eps } => {
                    if needs[0] {
                        let row = *node.shape.last().unwrap();
                        let x = std::rc::Rc::clone(&inner.nodes[node.inputs[0]].value);
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        kernels::layer_norm_backward(&x, &node.value, &gy, row, *eps, gx);
                    }
                }
                Op::SumAll { scale_recip } => {
                    if needs[0] {
                        let nin = numel(&inner.nodes[node.inputs[0]].shape);
                        let scale = if *scale_recip {
                            T::one() / T::from_f64(nin as f64)
                        } else {
                            T::one()
                        };
                        let g = gy[0] * scale;
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        for v in gx.iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::SumAxis { axis, scale_recip } => {
                    if needs[0] {
                        let in_shape = inner.nodes[node.inputs[0]].shape.clone();
                        let scale = if *scale_recip {
                            T::one() / T::from_f64(in_shape[*axis] as f64)
                        } else {
                            T::one()
                        };
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        kernels::sum_axis_backward(&gy, &in_shape, *axis, scale, gx);
                    }
                }
                Op::Reshape => {
                    if needs[0] {
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        for (g, &v) in gx.iter_mut().zip(&gy) {
                            *g += v;
                        }
                    }
                }
                Op::Permute { perm } => {
                    if needs[0] {
                        let in_shape = inner.nodes[node.inputs[0]].shape.clone();
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        kernels::permute_backward(&gy, &in_shape, perm, gx);
                    }
                }
                Op::Concat { axis } => {
                    let out_inner: usize = node.shape[*axis + 1..].iter().product();
                    let outer: usize = node.shape[..*axis].iter().product();
                    let out_row = node.shape[*axis] * out_inner;
                    let mut offset = 0;
                    for (pi, &inp) in node.inputs.iter().enumerate() {
                        let rows = inner.nodes[inp].shape[*axis] * out_inner;
                        if needs[pi] {
                            let gx = slots[inp].as_mut().unwrap();
                            for o in 0..outer {
                                let src = o * out_row + offset;
                                for i in 0..rows {
                                    gx[o * rows + i] += gy[src + i];
                                }
                            }
                        }
                        offset += rows;
                    }
                }
                Op::IndexSelect { axis, indices } => {
                    if needs[0] {
                        let in_shape = inner.nodes[node.inputs[0]].shape.clone();
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        kernels::index_select_backward(&gy, &in_shape, *axis, indices, gx);
                    }
                }
                Op::BroadcastTo => {
                    if needs[0] {
                        let in_shape = inner.nodes[node.inputs[0]].shape.clone();
                        let gx = slots[node.inputs[0]].as_mut().unwrap();
                        kernels::broadcast_to_backward(&gy, &in_shape, &node.shape, gx);
                    }
                }
            }
        }

        Ok(Gradients { slots })
    }

    /// Collect gradients for every parameter leafed into this graph.
    /// Parameters untouched by the loss get zero-filled gradients.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        let inner = self.inner.borrow();
        inner
            .param_nodes
            .iter()
            .map(|&(pid, nid)| {
                let g = grads
                    .take(nid)
                    .unwrap_or_else(|| vec![T::zero(); numel(&inner.nodes[nid].shape)]);
                (pid, g)
            })
            .collect()
    }
}

/// Disjoint mutable borrows of two grad slots.
fn split_two<T>(
    slots: &mut [Option<Vec<T>>],
    ia: usize,
    ib: usize,
) -> (Option<&mut Vec<T>>, Option<&mut Vec<T>>) {
    debug_assert_ne!(ia, ib);
    if ia < ib {
        let (lo, hi) = slots.split_at_mut(ib);
        (lo[ia].as_mut(), hi[0].as_mut())
    } else {
        let (lo, hi) = slots.split_at_mut(ia);
        (hi[0].as_mut(), lo[ib].as_mut())
    }
}
