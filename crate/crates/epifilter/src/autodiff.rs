//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values are computed eagerly while the graph is built, so a node always
//! carries its forward value; [`Graph::backward`] then walks the tape in
//! reverse creation order. Shape mismatches are programming errors and
//! panic; non-finite values poison the graph and surface as errors from
//! [`Graph::eval`] and [`Graph::backward`].
//!
//! Node values are never mutated after construction, which keeps repeated
//! evaluation and finite-difference checking well defined. One graph is
//! single-threaded; distinct graphs share nothing and may run concurrently.

use thiserror::Error;

use crate::linalg::jacobi_eigen_sym;

/// Arguments of `log` are clamped to at least this value to keep
/// cross-entropy terms finite on saturated probabilities.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value produced by op `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backpropagation requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite gradient for parameter node {node}")]
    NonFiniteGradient { node: usize },
    #[error("{0}")]
    BadInput(String),
}

/// Dense row-major array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Panics if `data.len()` does not match the shape's element count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} values, got {}",
            shape,
            numel,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Column vector `[n, 1]` from a slice.
    pub fn column(values: &[f64]) -> Self {
        Array::new(vec![values.len(), 1], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "expected scalar, got {:?}", self.shape);
        self.data[0]
    }

    /// True when every entry is finite. `x * 0.0` is zero exactly for finite
    /// `x` and NaN otherwise, so a running sum of those products vectorizes
    /// and still detects NaN and both infinities.
    pub fn all_finite(&self) -> bool {
        let mut acc = 0.0f64;
        for v in &self.data {
            acc += v * 0.0;
        }
        acc == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Power(f64),
    ReduceSum(Option<usize>),
    ReduceMean(Option<usize>),
    Broadcast,
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    SoftmaxOverAxis(usize),
    /// Unit eigenvector of the smallest eigenvalue of a symmetric matrix.
    MinEigvec,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Power(_) => "power",
            Op::ReduceSum(_) => "reduce_sum",
            Op::ReduceMean(_) => "reduce_mean",
            Op::Broadcast => "broadcast",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::SoftmaxOverAxis(_) => "softmax_over_axis",
            Op::MinEigvec => "min_eigvec",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Array,
}

/// Gradient map produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient with respect to `id`, if that node influenced the root.
    pub fn wrt(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `id`, zeros when the node had no influence.
    pub fn wrt_or_zeros(&self, graph: &Graph, id: NodeId) -> Array {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Array::zeros(graph.value(id).shape()),
        }
    }
}

/// Computation tape. Construction is evaluation: every op computes its
/// value when pushed.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    poison: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            poison: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    /// Forward value of a node. Panics on an invalid id; construction
    /// already computed the value.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Forward evaluation result for `root`. Errors if any node in the
    /// graph produced a non-finite value.
    pub fn eval(&self, root: NodeId) -> Result<&Array, DiffError> {
        if let Some((node, op)) = self.poison {
            return Err(DiffError::NonFinite { op, node });
        }
        Ok(self.value(root))
    }

    /// Scalar forward value, for loss roots.
    pub fn scalar(&self, root: NodeId) -> Result<f64, DiffError> {
        let v = self.eval(root)?;
        if !v.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.data()[0])
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Array) -> NodeId {
        let id = self.nodes.len();
        // Scan only ops that can introduce non-finite values from finite
        // inputs (plus raw data entering the graph); bounded maps and
        // rearrangements inherit finiteness from their parents.
        let needs_scan = matches!(
            op,
            Op::Constant
                | Op::Parameter
                | Op::Div
                | Op::Exp
                | Op::Power(_)
                | Op::MatMul
                | Op::ReduceSum(_)
                | Op::ReduceMean(_)
                | Op::MinEigvec
        );
        if needs_scan && self.poison.is_none() && !value.all_finite() {
            self.poison = Some((id, op.name()));
        }
        self.nodes.push(Node { op, parents, value });
        NodeId(id)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Constant, vec![], value)
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    pub fn parameter(&mut self, value: Array) -> NodeId {
        let id = self.push(Op::Parameter, vec![], value);
        self.params.push(id);
        id
    }

    fn binary_elementwise(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            va.shape(),
            vb.shape(),
            "shape mismatch in {}: {:?} vs {:?}",
            op.name(),
            va.shape(),
            vb.shape()
        );
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::new(va.shape().to_vec(), data);
        self.push(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(Op::Div, a, b, |x, y| x / y)
    }

    fn unary_elementwise(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let data: Vec<f64> = vx.data().iter().map(|&v| f(v)).collect();
        let value = Array::new(vx.shape().to_vec(), data);
        self.push(op, vec![x], value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(Op::Relu, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(Op::Tanh, x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(Op::Sigmoid, x, stable_sigmoid)
    }

    /// Natural log with the argument clamped to at least [`LOG_CLAMP`].
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(Op::Log, x, |v| v.max(LOG_CLAMP).ln())
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(Op::Exp, x, f64::exp)
    }

    pub fn power(&mut self, x: NodeId, exponent: f64) -> NodeId {
        self.unary_elementwise(Op::Power(exponent), x, |v| v.powf(exponent))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be rank 2");
        let (n, k) = (va.shape()[0], va.shape()[1]);
        let (k2, m) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims differ: {k} vs {k2}");
        let value = Array::new(vec![n, m], mm(va.data(), vb.data(), n, k, m));
        self.push(Op::MatMul, vec![a, b], value)
    }

    /// Sum over one axis (kept as size 1) or over everything (`None`).
    pub fn reduce_sum(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let value = reduce(vx, axis, false);
        self.push(Op::ReduceSum(axis), vec![x], value)
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let value = reduce(vx, axis, true);
        self.push(Op::ReduceMean(axis), vec![x], value)
    }

    /// Expand `x` to `target` shape; dimensions align from the trailing end
    /// and must be equal or 1 in the source.
    pub fn broadcast(&mut self, x: NodeId, target: &[usize]) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert!(
            broadcast_compatible(vx.shape(), target),
            "cannot broadcast {:?} to {:?}",
            vx.shape(),
            target
        );
        let value = broadcast_forward(vx, target);
        self.push(Op::Broadcast, vec![x], value)
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat needs at least one input");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        assert!(axis < first.len(), "concat axis {axis} out of range");
        let mut total_axis = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (a, b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis dims must match");
                }
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let out_stride = total_axis * inner;
        let mut axis_off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let len = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * len * inner..(o + 1) * len * inner];
                let dst_start = o * out_stride + axis_off * inner;
                data[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            axis_off += len;
        }
        self.push(Op::Concat(axis), parts.to_vec(), Array::new(out_shape, data))
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let shape = vx.shape();
        assert!(axis < shape.len(), "slice axis {axis} out of range");
        assert!(
            start < end && end <= shape[axis],
            "slice range {start}..{end} out of bounds for axis of size {}",
            shape[axis]
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        let src_stride = shape[axis] * inner;
        for o in 0..outer {
            let src = &vx.data()[o * src_stride + start * inner..o * src_stride + end * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        self.push(
            Op::Slice { axis, start, end },
            vec![x],
            Array::new(out_shape, data),
        )
    }

    /// Numerically stable softmax along `axis` (row max subtracted).
    pub fn softmax_over_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let shape = vx.shape().to_vec();
        assert!(axis < shape.len(), "softmax axis {axis} out of range");
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut data = vx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(data[base + a * inner]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (data[base + a * inner] - max).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[base + a * inner] /= sum;
                }
            }
        }
        self.push(
            Op::SoftmaxOverAxis(axis),
            vec![x],
            Array::new(shape, data),
        )
    }

    /// Unit eigenvector for the smallest eigenvalue of a symmetric `n x n`
    /// input; the entry of largest magnitude is made positive so the sign
    /// is deterministic. Output shape is `[n]`.
    pub fn min_eigvec(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let shape = vx.shape();
        assert!(
            shape.len() == 2 && shape[0] == shape[1],
            "min_eigvec needs a square matrix, got {:?}",
            shape
        );
        let n = shape[0];
        let value = match jacobi_eigen_sym(vx.data(), n) {
            Ok((_, vecs)) => {
                let mut e: Vec<f64> = (0..n).map(|r| vecs[r * n]).collect();
                fix_eigvec_sign(&mut e);
                Array::new(vec![n], e)
            }
            Err(_) => Array::full(&[n], f64::NAN),
        };
        self.push(Op::MinEigvec, vec![x], value)
    }

    // -- compound helpers (no new op kinds) --------------------------------

    /// `x * c` elementwise via a broadcast scalar constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let k = self.scalar_const(c);
        let kb = self.broadcast(k, &shape);
        self.mul(x, kb)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let ones = self.constant(Array::full(self.nodes[x.0].value.shape(), 1.0));
        self.sub(ones, x)
    }

    /// Gradient of a scalar-valued root with respect to every node that
    /// feeds it. Contributions across fan-out accumulate by summation.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, DiffError> {
        if let Some((node, op)) = self.poison {
            return Err(DiffError::NonFinite { op, node });
        }
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array::full(root_val.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.backward_step(id, &grad, &mut grads);
            // Reverse creation order means every consumer has already
            // contributed, so intermediate gradients are dead after their
            // step; only leaf gradients remain queryable.
            if matches!(self.nodes[id].op, Op::Parameter | Op::Constant) {
                grads[id] = Some(grad);
            }
        }

        for &p in &self.params {
            if let Some(g) = &grads[p.0] {
                if !g.all_finite() {
                    return Err(DiffError::NonFiniteGradient { node: p.0 });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_step(&self, id: usize, grad: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        let parents = &node.parents;
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::Add => {
                accumulate_ref(grads, parents[0], grad);
                accumulate_ref(grads, parents[1], grad);
            }
            Op::Sub => {
                accumulate_ref(grads, parents[0], grad);
                let neg = map1(grad, |g| -g);
                accumulate(grads, parents[1], neg);
            }
            Op::Mul => {
                let (a, b) = (self.value(parents[0]), self.value(parents[1]));
                accumulate(grads, parents[0], map2(grad, b, |g, y| g * y));
                accumulate(grads, parents[1], map2(grad, a, |g, x| g * x));
            }
            Op::Div => {
                let (a, b) = (self.value(parents[0]), self.value(parents[1]));
                accumulate(grads, parents[0], map2(grad, b, |g, y| g / y));
                let gb = map3(grad, a, b, |g, x, y| -g * x / (y * y));
                accumulate(grads, parents[1], gb);
            }
            Op::MatMul => {
                let (a, b) = (self.value(parents[0]), self.value(parents[1]));
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let m = b.shape()[1];
                // dA = dC . B^T ; dB = A^T . dC
                let da = Array::new(vec![n, k], mm_bt(grad.data(), b.data(), n, m, k));
                let db = Array::new(vec![k, m], mm_at(a.data(), grad.data(), n, k, m));
                accumulate(grads, parents[0], da);
                accumulate(grads, parents[1], db);
            }
            Op::Relu => {
                let x = self.value(parents[0]);
                accumulate(
                    grads,
                    parents[0],
                    map2(grad, x, |g, v| if v > 0.0 { g } else { 0.0 }),
                );
            }
            Op::Tanh => {
                let y = &node.value;
                accumulate(grads, parents[0], map2(grad, y, |g, t| g * (1.0 - t * t)));
            }
            Op::Sigmoid => {
                let y = &node.value;
                accumulate(grads, parents[0], map2(grad, y, |g, s| g * s * (1.0 - s)));
            }
            Op::Log => {
                let x = self.value(parents[0]);
                let gx = map2(grad, x, |g, v| if v > LOG_CLAMP { g / v } else { 0.0 });
                accumulate(grads, parents[0], gx);
            }
            Op::Exp => {
                let y = &node.value;
                accumulate(grads, parents[0], map2(grad, y, |g, e| g * e));
            }
            Op::Power(p) => {
                let x = self.value(parents[0]);
                let p = *p;
                let gx = map2(grad, x, |g, v| g * p * v.powf(p - 1.0));
                accumulate(grads, parents[0], gx);
            }
            Op::ReduceSum(axis) => {
                let x_shape = self.value(parents[0]).shape().to_vec();
                accumulate(grads, parents[0], broadcast_forward(grad, &x_shape));
                let _ = axis;
            }
            Op::ReduceMean(axis) => {
                let x_shape = self.value(parents[0]).shape().to_vec();
                let count = match axis {
                    None => x_shape.iter().product::<usize>(),
                    Some(ax) => x_shape[*ax],
                } as f64;
                let expanded = broadcast_forward(grad, &x_shape);
                accumulate(grads, parents[0], map1(&expanded, |g| g / count));
            }
            Op::Broadcast => {
                let x_shape = self.value(parents[0]).shape().to_vec();
                accumulate(grads, parents[0], broadcast_backward(grad, &x_shape));
            }
            Op::Concat(axis) => {
                let axis = *axis;
                let mut start = 0;
                for &p in parents {
                    let len = self.value(p).shape()[axis];
                    let g = slice_array(grad, axis, start, start + len);
                    accumulate(grads, p, g);
                    start += len;
                }
            }
            Op::Slice { axis, start, end } => {
                let x_shape = self.value(parents[0]).shape().to_vec();
                let mut full = Array::zeros(&x_shape);
                scatter_slice(&mut full, grad, *axis, *start, *end);
                accumulate(grads, parents[0], full);
            }
            Op::SoftmaxOverAxis(axis) => {
                let s = &node.value;
                let shape = s.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut gx = vec![0.0; s.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for a in 0..len {
                            let k = base + a * inner;
                            dot += grad.data()[k] * s.data()[k];
                        }
                        for a in 0..len {
                            let k = base + a * inner;
                            gx[k] = s.data()[k] * (grad.data()[k] - dot);
                        }
                    }
                }
                accumulate(grads, parents[0], Array::new(shape, gx));
            }
            Op::MinEigvec => {
                let a = self.value(parents[0]);
                let n = a.shape()[0];
                let ga = min_eigvec_backward(a.data(), n, grad.data());
                accumulate(grads, parents[0], Array::new(vec![n, n], ga));
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn fix_eigvec_sign(e: &mut [f64]) {
    let mut j = 0;
    let mut best = 0.0;
    for (i, v) in e.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            j = i;
        }
    }
    if e[j] < 0.0 {
        for v in e.iter_mut() {
            *v = -*v;
        }
    }
}

/// Gradient of the smallest-eigenvalue unit eigenvector with respect to the
/// (symmetric) input matrix. With eigenpairs `(l_k, e_k)` and upstream
/// gradient `g`, the perturbation identity `de = -(A - l0 I)^+ dA e0` gives
/// `dL/dA = -(h e0^T + e0 h^T) / 2` where `h = sum_k (e_k . g)/(l_k - l0) e_k`.
fn min_eigvec_backward(a: &[f64], n: usize, g: &[f64]) -> Vec<f64> {
    let Ok((vals, vecs)) = jacobi_eigen_sym(a, n) else {
        return vec![f64::NAN; n * n];
    };
    let col = |k: usize| -> Vec<f64> { (0..n).map(|r| vecs[r * n + k]).collect() };
    let mut e0 = col(0);
    fix_eigvec_sign(&mut e0);
    let mut h = vec![0.0; n];
    for k in 1..n {
        let gap = vals[k] - vals[0];
        if gap.abs() < 1e-12 {
            continue;
        }
        let ek = col(k);
        let coeff = ek.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>() / gap;
        for (hi, ei) in h.iter_mut().zip(ek.iter()) {
            *hi += coeff * ei;
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = -0.5 * (h[i] * e0[j] + e0[i] * h[j]);
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Array>], target: NodeId, delta: Array) {
    match &mut grads[target.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (a, b) in existing.data.iter_mut().zip(delta.data.iter()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Borrowing variant: clones only when the slot is empty.
fn accumulate_ref(grads: &mut [Option<Array>], target: NodeId, delta: &Array) {
    match &mut grads[target.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (a, b) in existing.data.iter_mut().zip(delta.data.iter()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.clone()),
    }
}

fn map1(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn map2(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn map3(a: &Array, b: &Array, c: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .zip(c.data().iter())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Array::new(a.shape().to_vec(), data)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// `C = A(n,k) . B(k,m)`, row-major, i-k-j order so the inner loop runs
/// along contiguous rows.
fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * m..(l + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `C = A(n,m) . B(k,m)^T` -> `(n,k)`; rows of both operands are contiguous.
fn mm_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let orow = &mut out[i * k..(i + 1) * k];
        for (l, o) in orow.iter_mut().enumerate() {
            let brow = &b[l * m..(l + 1) * m];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                s += x * y;
            }
            *o = s;
        }
    }
    out
}

/// `C = A(n,k)^T . B(n,m)` -> `(k,m)`.
fn mm_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * m..(l + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn reduce(x: &Array, axis: Option<usize>, mean: bool) -> Array {
    match axis {
        None => {
            let sum: f64 = x.data().iter().sum();
            let v = if mean { sum / x.numel() as f64 } else { sum };
            Array::scalar(v)
        }
        Some(ax) => {
            let shape = x.shape();
            assert!(ax < shape.len(), "reduce axis {ax} out of range");
            let (outer, len, inner) = axis_split(shape, ax);
            let mut out_shape = shape.to_vec();
            out_shape[ax] = 1;
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(&x.data()[base..base + inner]) {
                        *d += s;
                    }
                }
            }
            if mean {
                for v in &mut data {
                    *v /= len as f64;
                }
            }
            Array::new(out_shape, data)
        }
    }
}

fn broadcast_compatible(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let offset = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == dst[i + offset])
}

fn broadcast_forward(src: &Array, dst_shape: &[usize]) -> Array {
    let numel: usize = dst_shape.iter().product();
    if src.numel() == 1 {
        return Array::full(dst_shape, src.data()[0]);
    }
    if src.shape() == dst_shape {
        return Array::new(dst_shape.to_vec(), src.data().to_vec());
    }
    // Fast paths for the two row/column patterns the network blocks use.
    if dst_shape.len() == 2 && src.shape().len() == 2 {
        let (n, c) = (dst_shape[0], dst_shape[1]);
        if src.shape() == [1, c] {
            let mut data = vec![0.0; numel];
            for row in data.chunks_exact_mut(c) {
                row.copy_from_slice(src.data());
            }
            return Array::new(dst_shape.to_vec(), data);
        }
        if src.shape() == [n, 1] {
            let mut data = vec![0.0; numel];
            for (row, &v) in data.chunks_exact_mut(c).zip(src.data().iter()) {
                row.fill(v);
            }
            return Array::new(dst_shape.to_vec(), data);
        }
    }
    // Generic strided copy.
    let rank = dst_shape.len();
    let strides = broadcast_strides(src.shape(), dst_shape);
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for slot in data.iter_mut() {
        *slot = src.data()[off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < dst_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * dst_shape[ax];
        }
    }
    Array::new(dst_shape.to_vec(), data)
}

fn broadcast_backward(grad: &Array, src_shape: &[usize]) -> Array {
    let src_numel: usize = src_shape.iter().product();
    if src_numel == 1 {
        let sum: f64 = grad.data().iter().sum();
        return Array::new(src_shape.to_vec(), vec![sum]);
    }
    if grad.shape() == src_shape {
        return grad.clone();
    }
    if grad.shape().len() == 2 && src_shape.len() == 2 {
        let (n, c) = (grad.shape()[0], grad.shape()[1]);
        if src_shape == [1, c] {
            let mut data = vec![0.0; c];
            for row in grad.data().chunks_exact(c) {
                for (d, &g) in data.iter_mut().zip(row.iter()) {
                    *d += g;
                }
            }
            return Array::new(src_shape.to_vec(), data);
        }
        if src_shape == [n, 1] {
            let data: Vec<f64> = grad
                .data()
                .chunks_exact(c)
                .map(|row| row.iter().sum())
                .collect();
            return Array::new(src_shape.to_vec(), data);
        }
    }
    let rank = grad.shape().len();
    let strides = broadcast_strides(src_shape, grad.shape());
    let mut data = vec![0.0; src_numel];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad.data() {
        data[off] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < grad.shape()[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * grad.shape()[ax];
        }
    }
    Array::new(src_shape.to_vec(), data)
}

fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    strides
}

fn slice_array(x: &Array, axis: usize, start: usize, end: usize) -> Array {
    let shape = x.shape();
    let (outer, len, inner) = axis_split(shape, axis);
    let out_len = end - start;
    let mut out_shape = shape.to_vec();
    out_shape[axis] = out_len;
    let mut data = vec![0.0; outer * out_len * inner];
    for o in 0..outer {
        let src = &x.data()[o * len * inner + start * inner..o * len * inner + end * inner];
        data[o * out_len * inner..(o + 1) * out_len * inner].copy_from_slice(src);
    }
    Array::new(out_shape, data)
}

fn scatter_slice(full: &mut Array, part: &Array, axis: usize, start: usize, end: usize) {
    let shape = full.shape().to_vec();
    let (outer, len, inner) = axis_split(&shape, axis);
    let part_len = end - start;
    for o in 0..outer {
        let dst =
            &mut full.data_mut()[o * len * inner + start * inner..o * len * inner + end * inner];
        let src = &part.data()[o * part_len * inner..(o + 1) * part_len * inner];
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d += s;
        }
    }
}

/// Max relative error between the analytic gradient of a scalar function and
/// central finite differences, coordinate by coordinate:
/// `|analytic - fd| / max(|analytic|, 1e-12)`.
///
/// `build` constructs the function from a parameter node; it is re-invoked
/// on a fresh graph for every perturbed evaluation.
pub fn finite_difference_check<F>(build: F, point: &Array, epsilon: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    if epsilon <= 0.0 {
        return Err(DiffError::BadInput("epsilon must be positive".into()));
    }
    let eval_at = |values: &Array| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let p = g.parameter(values.clone());
        let root = build(&mut g, p);
        g.scalar(root)
    };

    let mut g = Graph::new();
    let p = g.parameter(point.clone());
    let root = build(&mut g, p);
    g.scalar(root)?;
    let grads = g.backward(root)?;
    let analytic = grads.wrt_or_zeros(&g, p);

    let mut max_rel = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let fd = (eval_at(&plus)? - eval_at(&minus)?) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Multi-tensor variant of [`finite_difference_check`]: `build` receives one
/// parameter node per entry of `points` and the error is maximized over all
/// coordinates of all tensors.
pub fn finite_difference_check_params<F>(
    build: F,
    points: &[Array],
    epsilon: f64,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    if epsilon <= 0.0 {
        return Err(DiffError::BadInput("epsilon must be positive".into()));
    }
    let eval_at = |values: &[Array]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.parameter(v.clone())).collect();
        let root = build(&mut g, &ids);
        g.scalar(root)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|v| g.parameter(v.clone())).collect();
    let root = build(&mut g, &ids);
    g.scalar(root)?;
    let grads = g.backward(root)?;

    let mut max_rel = 0.0f64;
    let mut work: Vec<Array> = points.to_vec();
    for (t, point) in points.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(&g, ids[t]);
        for i in 0..point.numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + epsilon;
            let fp = eval_at(&work)?;
            work[t].data_mut()[i] = orig - epsilon;
            let fm = eval_at(&work)?;
            work[t].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
