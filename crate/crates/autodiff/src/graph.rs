//! Eager tape: ops compute forward values immediately and record themselves
//! for the reverse pass.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::AdError;
use crate::kernels::{self, BinaryKind, UnaryKind};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::shape::{broadcast_shapes, numel};
use crate::Result;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    StopGrad,
    Unary(UnaryKind),
    AddScalar(T),
    Scale(T),
    ClampMin(T),
    Binary(BinaryKind),
    Bmm { batch: usize, m: usize, k: usize, n: usize },
    SoftmaxLast,
    LayerNormLast { eps: T },
    SumAxis { axis: usize, scale_recip: bool },
    SumAll { scale_recip: bool },
    Reshape,
    Permute { perm: Vec<usize> },
    Concat { axis: usize },
    IndexSelect { axis: usize, indices: Rc<Vec<usize>> },
    BroadcastTo,
}

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    pub value: Rc<Vec<T>>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
}

pub(crate) struct GraphInner<T: Scalar> {
    pub nodes: Vec<Node<T>>,
    pub param_nodes: Vec<(ParamId, NodeId)>,
    param_lookup: HashMap<usize, NodeId>,
}

/// Shared handle to the tape. Clones are cheap and refer to the same tape.
pub struct Graph<T: Scalar> {
    pub(crate) inner: Rc<RefCell<GraphInner<T>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node. Holds the forward value, so host-side code can
/// read it without touching the graph.
pub struct Tensor<T: Scalar> {
    pub(crate) graph: Graph<T>,
    pub(crate) id: NodeId,
    shape: Vec<usize>,
    value: Rc<Vec<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
            shape: self.shape.clone(),
            value: Rc::clone(&self.value),
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                param_nodes: Vec::new(),
                param_lookup: HashMap::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: Vec<T>,
        shape: Vec<usize>,
        needs_grad: bool,
    ) -> Tensor<T> {
        debug_assert_eq!(value.len(), numel(&shape));
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            value: Rc::clone(&value),
            shape: shape.clone(),
            needs_grad,
        });
        Tensor {
            graph: self.clone(),
            id,
            shape,
            value,
        }
    }

    /// Non-differentiable input.
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if data.len() != numel(shape) {
            return Err(AdError::contract(
                "constant",
                format!("{} elements for shape {:?}", data.len(), shape),
            ));
        }
        Ok(self.push(Op::Leaf, vec![], data, shape.to_vec(), false))
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.push(Op::Leaf, vec![], vec![v], vec![], false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<T> {
        self.push(Op::Leaf, vec![], vec![T::zero(); numel(shape)], shape.to_vec(), false)
    }

    /// Differentiable input that is not a parameter (gradient-check probes).
    pub fn leaf(&self, data: Vec<T>, shape: &[usize], needs_grad: bool) -> Result<Tensor<T>> {
        if data.len() != numel(shape) {
            return Err(AdError::contract(
                "leaf",
                format!("{} elements for shape {:?}", data.len(), shape),
            ));
        }
        Ok(self.push(Op::Leaf, vec![], data, shape.to_vec(), needs_grad))
    }

    /// Insert a parameter as a leaf. Repeated insertions of the same id share
    /// one node, so gradients accumulate in a single slot.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        if let Some(&nid) = self.inner.borrow().param_lookup.get(&id.0) {
            let inner = self.inner.borrow();
            let node = &inner.nodes[nid];
            return Tensor {
                graph: self.clone(),
                id: nid,
                shape: node.shape.clone(),
                value: Rc::clone(&node.value),
            };
        }
        let p = store.get(id);
        let needs_grad = p.trainable && !p.frozen;
        let value = Rc::clone(&p.data);
        let shape = p.shape.clone();
        let mut inner = self.inner.borrow_mut();
        let nid = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: Rc::clone(&value),
            shape: shape.clone(),
            needs_grad,
        });
        inner.param_nodes.push((id, nid));
        inner.param_lookup.insert(id.0, nid);
        Tensor {
            graph: self.clone(),
            id: nid,
            shape,
            value,
        }
    }

    /// Standard-normal draw as a constant leaf (non-differentiable source).
    /// Sampling goes through f64 so all precisions consume one stream.
    pub fn randn(&self, rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
        let n = numel(shape);
        let data: Vec<T> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64(v)
            })
            .collect();
        self.push(Op::Leaf, vec![], data, shape.to_vec(), false)
    }

    pub fn concat(&self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(AdError::contract("concat", "no inputs"));
        }
        let first = parts[0];
        let ndim = first.shape.len();
        if axis >= ndim {
            return Err(AdError::contract("concat", format!("axis {axis} out of range")));
        }
        let mut out_shape = first.shape.clone();
        let mut axis_total = 0;
        for p in parts {
            if !Rc::ptr_eq(&p.graph.inner, &self.inner) {
                return Err(AdError::contract("concat", "tensors from different graphs"));
            }
            if p.shape.len() != ndim {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            for (ax, (&a, &b)) in first.shape.iter().zip(p.shape.iter()).enumerate() {
                if ax != axis && a != b {
                    return Err(AdError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape.clone(),
                        rhs: p.shape.clone(),
                    });
                }
            }
            axis_total += p.shape[axis];
        }
        out_shape[axis] = axis_total;

        let inner_len: usize = first.shape[axis + 1..].iter().product();
        let outer: usize = first.shape[..axis].iter().product();
        let mut out = vec![T::zero(); numel(&out_shape)];
        let out_row = axis_total * inner_len;
        let mut offset = 0;
        for p in parts {
            let rows = p.shape[axis] * inner_len;
            for o in 0..outer {
                let dst = o * out_row + offset;
                out[dst..dst + rows].copy_from_slice(&p.value[o * rows..(o + 1) * rows]);
            }
            offset += rows;
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Op::Concat { axis }, ids, out, out_shape, needs))
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> Graph<T> {
        self.graph.clone()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    /// Forward value widened to f64 for host-side diagnostics.
    pub fn value_f64(&self) -> Vec<f64> {
        self.value.iter().map(|&v| v.to_f64()).collect()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.value.len(), 1);
        self.value[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].needs_grad
    }

    fn same_graph(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(AdError::contract(op, "tensors from different graphs"))
        }
    }

    fn unary(&self, kind: UnaryKind) -> Tensor<T> {
        let out = kernels::unary_forward(kind, &self.value);
        self.graph.push(
            Op::Unary(kind),
            vec![self.id],
            out,
            self.shape.clone(),
            self.needs_grad(),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(&self) -> Tensor<T> {
        self.unary(UnaryKind::Exp)
    }
    pub fn ln(&self) -> Tensor<T> {
        self.unary(UnaryKind::Ln)
    }
    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn abs(&self) -> Tensor<T> {
        self.unary(UnaryKind::Abs)
    }
    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn elu(&self) -> Tensor<T> {
        self.unary(UnaryKind::Elu)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.value.iter().map(|&v| v + c).collect();
        self.graph.push(
            Op::AddScalar(c),
            vec![self.id],
            out,
            self.shape.clone(),
            self.needs_grad(),
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.value.iter().map(|&v| v * c).collect();
        self.graph.push(
            Op::Scale(c),
            vec![self.id],
            out,
            self.shape.clone(),
            self.needs_grad(),
        )
    }

    pub fn clamp_min(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.value.iter().map(|&v| if v > c { v } else { c }).collect();
        self.graph.push(
            Op::ClampMin(c),
            vec![self.id],
            out,
            self.shape.clone(),
            self.needs_grad(),
        )
    }

    pub fn stop_gradient(&self) -> Tensor<T> {
        self.graph.push(
            Op::StopGrad,
            vec![self.id],
            self.value.as_ref().clone(),
            self.shape.clone(),
            false,
        )
    }

    fn binary(&self, other: &Tensor<T>, kind: BinaryKind, name: &'static str) -> Result<Tensor<T>> {
        self.same_graph(other, name)?;
        let out_shape = broadcast_shapes(&self.shape, &other.shape).ok_or_else(|| {
            AdError::ShapeMismatch {
                op: name,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }
        })?;
        let out = kernels::binary_forward(kind, &self.value, &self.shape, &other.value, &other.shape, &out_shape);
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self
            .graph
            .push(Op::Binary(kind), vec![self.id, other.id], out, out_shape, needs))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Add, "add")
    }
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.mul(self)
    }

    /// 2-D matrix multiply.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        self.bmm(other)
    }

    /// Batched matmul: [lead.., m, k] x [lead.., k, n] with equal leading dims.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_graph(other, "bmm")?;
        let (a, b) = (&self.shape, &other.shape);
        if a.len() < 2 || b.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2]
        {
            return Err(AdError::ShapeMismatch {
                op: "bmm",
                lhs: a.clone(),
                rhs: b.clone(),
            });
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op: "bmm",
                lhs: a.clone(),
                rhs: b.clone(),
            });
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let out = kernels::bmm_forward(&self.value, &other.value, batch, m, k, n);
        let mut out_shape = a[..a.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self.graph.push(
            Op::Bmm { batch, m, k, n },
            vec![self.id, other.id],
            out,
            out_shape,
            needs,
        ))
    }

    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        if self.ndim() == 0 {
            return Err(AdError::contract("softmax", "needs at least one axis"));
        }
        let row = *self.shape.last().unwrap();
        let out = kernels::softmax_last_forward(&self.value, row);
        Ok(self.graph.push(
            Op::SoftmaxLast,
            vec![self.id],
            out,
            self.shape.clone(),
            self.needs_grad(),
        ))
    }

    /// Normalize the last axis to zero mean / unit variance (no affine).
    pub fn layer_norm_last(&self, eps: T) -> Result<Tensor<T>> {
        if self.ndim() == 0 {
            return Err(AdError::contract("layer_norm", "needs at least one axis"));
        }
        let row = *self.shape.last().unwrap();
        let out = kernels::layer_norm_forward(&self.value, row, eps);
        Ok(self.graph.push(
            Op::LayerNormLast { eps },
            vec![self.id],
            out,
            self.shape.clone(),
            self.needs_grad(),
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.value.iter().copied().sum();
        self.graph.push(
            Op::SumAll { scale_recip: false },
            vec![self.id],
            vec![s],
            vec![],
            self.needs_grad(),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        let s: T = self.value.iter().copied().sum::<T>() / n;
        self.graph.push(
            Op::SumAll { scale_recip: true },
            vec![self.id],
            vec![s],
            vec![],
            self.needs_grad(),
        )
    }

    fn reduce_axis(&self, axis: usize, keepdim: bool, mean: bool, name: &'static str) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(AdError::contract(name, format!("axis {axis} out of range")));
        }
        let mut out = kernels::sum_axis_forward(&self.value, &self.shape, axis);
        if mean {
            let d = T::from_f64(self.shape[axis] as f64);
            for v in out.iter_mut() {
                *v /= d;
            }
        }
        let mut out_shape = self.shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(self.graph.push(
            Op::SumAxis { axis, scale_recip: mean },
            vec![self.id],
            out,
            out_shape,
            self.needs_grad(),
        ))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        self.reduce_axis(axis, keepdim, false, "sum_axis")
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        self.reduce_axis(axis, keepdim, true, "mean_axis")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.graph.push(
            Op::Reshape,
            vec![self.id],
            self.value.as_ref().clone(),
            shape.to_vec(),
            self.needs_grad(),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let ndim = self.ndim();
        let mut seen = vec![false; ndim];
        if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
            return Err(AdError::contract("permute", format!("invalid permutation {perm:?}")));
        }
        let out = kernels::permute_forward(&self.value, &self.shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        Ok(self.graph.push(
            Op::Permute { perm: perm.to_vec() },
            vec![self.id],
            out,
            out_shape,
            self.needs_grad(),
        ))
    }

    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let ndim = self.ndim();
        if ndim < 2 {
            return Err(AdError::contract("transpose", "needs >= 2 axes"));
        }
        let mut perm: Vec<usize> = (0..ndim).collect();
        perm.swap(ndim - 2, ndim - 1);
        self.permute(&perm)
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(AdError::contract("index_select", format!("axis {axis} out of range")));
        }
        let len = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(AdError::contract(
                "index_select",
                format!("index {bad} out of range for axis of extent {len}"),
            ));
        }
        let out = kernels::index_select_forward(&self.value, &self.shape, axis, indices);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = indices.len();
        Ok(self.graph.push(
            Op::IndexSelect {
                axis,
                indices: Rc::new(indices.to_vec()),
            },
            vec![self.id],
            out,
            out_shape,
            self.needs_grad(),
        ))
    }

    /// Contiguous slice along one axis.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || end > self.shape[axis] || start > end {
            return Err(AdError::contract(
                "slice_axis",
                format!("range {start}..{end} on axis {axis} of {:?}", self.shape),
            ));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.index_select(axis, &idx)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if broadcast_shapes(&self.shape, shape) != Some(shape.to_vec()) {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let out = kernels::broadcast_to_forward(&self.value, &self.shape, shape);
        Ok(self.graph.push(
            Op::BroadcastTo,
            vec![self.id],
            out,
            shape.to_vec(),
            self.needs_grad(),
        ))
    }

    /// log(sum(exp(x))) over the last axis, stabilized by the row max taken
    /// as a constant (the shift cancels in the gradient).
    pub fn logsumexp_last(&self, keepdim: bool) -> Result<Tensor<T>> {
        if self.ndim() == 0 {
            return Err(AdError::contract("logsumexp", "needs at least one axis"));
        }
        let row = *self.shape.last().unwrap();
        let rows = self.numel() / row;
        let mut maxes = Vec::with_capacity(rows);
        for r in self.value.chunks(row) {
            let mut mx = r[0];
            for &v in r {
                if v > mx {
                    mx = v;
                }
            }
            maxes.push(mx);
        }
        let mut mshape = self.shape.clone();
        *mshape.last_mut().unwrap() = 1;
        let m = self.graph.constant(maxes, &mshape)?;
        let shifted = self.sub(&m)?;
        let lse = shifted
            .exp()
            .sum_axis(self.ndim() - 1, true)?
            .ln()
            .add(&m)?;
        if keepdim {
            Ok(lse)
        } else {
            let mut out_shape = self.shape.clone();
            out_shape.pop();
            lse.reshape(&out_shape)
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}
