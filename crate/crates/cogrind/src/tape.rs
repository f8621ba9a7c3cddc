//! Reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Leaves enter via
//! [`Tape::leaf`] (trainable, receives gradients) or [`Tape::constant`];
//! every primitive pushes one node recording its inputs, so the arena
//! order is already topological. [`Tape::backward`] walks it once in
//! reverse, accumulating `+=` into per-node slots so shared subexpressions
//! differentiate correctly, and adds the result into each leaf's
//! persistent `grad` buffer (repeated backward calls therefore accumulate;
//! see `backward_accumulates_across_calls`).
//!
//! Primitives validate shapes up front and reject non-finite outputs, so
//! NaN/Inf surfaces as an error at the op that produced it instead of
//! propagating silently.
//!
//! Broadcasting is deliberately limited to [`Tape::scale`] (scalar) and
//! [`Tape::add_bias`] (per-channel); everything else aligns shapes with
//! explicit [`Tape::reshape`]/[`Tape::permute`].

use crate::tensor::{fmt_shape, permute_data, Real, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Norm floor for [`Tape::l2norm`]: rows with a smaller norm are divided
/// by the floor instead, keeping the op finite and differentiable.
pub const L2_NORM_FLOOR: Real = 1e-8;

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: TensorId, b: TensorId },
    Conv1x1 { x: TensorId, w: TensorId, b: TensorId },
    Concat { parts: Vec<TensorId> },
    Add { a: TensorId, b: TensorId },
    AddBias { x: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: Real },
    Softmax { x: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    Relu { x: TensorId },
    L2Norm { x: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    MaxLast { x: TensorId },
    GatherRows { x: TensorId, rows: Vec<usize> },
    Permute { x: TensorId, perm: Vec<usize> },
    Reshape { x: TensorId },
    SoftmaxXent { logits: TensorId, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Persistent gradient, populated for leaves only.
    grad: Option<Vec<Real>>,
    op: Option<Op>,
}

/// Append-only autodiff arena. One tape per forward/backward pass; build
/// a fresh tape for each training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a non-trainable input. Rejects non-finite data.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId, TensorError> {
        self.push(value, false, None, "constant")
    }

    /// Insert a trainable leaf; `backward` accumulates into its grad.
    pub fn leaf(&mut self, value: Tensor) -> Result<TensorId, TensorError> {
        self.push(value, true, None, "leaf")
    }

    /// Shape-`[1]` constant.
    pub fn scalar_const(&mut self, v: Real) -> Result<TensorId, TensorError> {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Convenience: the value of a one-element node.
    pub fn value_scalar(&self, id: TensorId) -> Real {
        self.nodes[id.0].value.item()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[Real]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Remove and return a leaf's accumulated gradient.
    pub fn take_grad(&mut self, id: TensorId) -> Option<Vec<Real>> {
        self.nodes[id.0].grad.take()
    }

    fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        op: Option<Op>,
        opname: &'static str,
    ) -> Result<TensorId, TensorError> {
        if value.first_non_finite().is_some() {
            return Err(TensorError::NonFinite { op: opname });
        }
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    // ---- primitives ----

    /// 2-d matrix product `a @ b`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0) {
            return Err(TensorError::shape(
                "matmul",
                format!("expected [m, k] x [k, n], got {} x {}", fmt_shape(va.shape()), fmt_shape(vb.shape())),
            ));
        }
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        let mut out = vec![0.0; m * n];
        mm_acc(va.data(), vb.data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, rg, Some(Op::Matmul { a, b }), "matmul")
    }

    /// Pointwise (1x1) convolution over the last dimension: treats all
    /// leading dims of `x` as positions, maps `c_in -> c_out` with weight
    /// `[c_in, c_out]` plus bias `[c_out]`.
    pub fn conv1x1(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (vx, vw, vb) = (self.val(x), self.val(w), self.val(b));
        let ok = vx.ndim() >= 2
            && vw.ndim() == 2
            && vb.ndim() == 1
            && vx.last_dim() == vw.dim(0)
            && vw.dim(1) == vb.dim(0);
        if !ok {
            return Err(TensorError::shape(
                "conv1x1",
                format!(
                    "expected x [.., c_in], w [c_in, c_out], b [c_out]; got {} / {} / {}",
                    fmt_shape(vx.shape()),
                    fmt_shape(vw.shape()),
                    fmt_shape(vb.shape())
                ),
            ));
        }
        let c_in = vw.dim(0);
        let c_out = vw.dim(1);
        let rows = vx.numel() / c_in;
        let mut out = vec![0.0; rows * c_out];
        mm_acc(vx.data(), vw.data(), rows, c_in, c_out, &mut out);
        for r in 0..rows {
            for (j, bj) in vb.data().iter().enumerate() {
                out[r * c_out + j] += bj;
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = c_out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(shape, out)?, rg, Some(Op::Conv1x1 { x, w, b }), "conv1x1")
    }

    /// Concatenate along the last dimension. All inputs must agree on the
    /// leading dimensions.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "needs at least one input"));
        }
        let lead = self.val(parts[0]).shape()[..self.val(parts[0]).ndim() - 1].to_vec();
        for &p in parts {
            let v = self.val(p);
            if v.ndim() == 0 || v.shape()[..v.ndim() - 1] != lead[..] {
                return Err(TensorError::shape(
                    "concat",
                    format!(
                        "leading dims differ: {} vs {}",
                        fmt_shape(self.val(parts[0]).shape()),
                        fmt_shape(v.shape())
                    ),
                ));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.val(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out)?, rg, Some(Op::Concat { parts: parts.to_vec() }), "concat")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(
                "add",
                format!("shapes differ: {} vs {}", fmt_shape(va.shape()), fmt_shape(vb.shape())),
            ));
        }
        let out: Vec<Real> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(va.shape().to_vec(), out)?, rg, Some(Op::Add { a, b }), "add")
    }

    /// Add a `[c]` bias vector to every position of `x: [.., c]`.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (vx, vb) = (self.val(x), self.val(b));
        if vb.ndim() != 1 || vx.last_dim() != vb.dim(0) {
            return Err(TensorError::shape(
                "add_bias",
                format!("expected x [.., c], b [c]; got {} / {}", fmt_shape(vx.shape()), fmt_shape(vb.shape())),
            ));
        }
        let c = vb.dim(0);
        let mut out = vx.data().to_vec();
        for (i, slot) in out.iter_mut().enumerate() {
            *slot += vb.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Tensor::new(vx.shape().to_vec(), out)?, rg, Some(Op::AddBias { x, b }), "add_bias")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("shapes differ: {} vs {}", fmt_shape(va.shape()), fmt_shape(vb.shape())),
            ));
        }
        let out: Vec<Real> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(va.shape().to_vec(), out)?, rg, Some(Op::Mul { a, b }), "mul")
    }

    /// Multiply every element by the fixed scalar `c`.
    pub fn scale(&mut self, x: TensorId, c: Real) -> Result<TensorId, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::invalid("scale", format!("scale factor {c} is not finite")));
        }
        let vx = self.val(x);
        let out: Vec<Real> = vx.data().iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vx.shape().to_vec(), out)?, rg, Some(Op::Scale { x, c }), "scale")
    }

    /// Softmax over the last dimension, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        if vx.ndim() == 0 || vx.last_dim() == 0 {
            return Err(TensorError::shape("softmax", format!("needs a non-empty last dim, got {}", fmt_shape(vx.shape()))));
        }
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vx.shape().to_vec(), out)?, rg, Some(Op::Softmax { x }), "softmax")
    }

    /// Logistic sigmoid, elementwise (overflow-safe split form).
    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        let out: Vec<Real> = vx.data().iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vx.shape().to_vec(), out)?, rg, Some(Op::Sigmoid { x }), "sigmoid")
    }

    /// Hyperbolic tangent, elementwise.
    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        let out: Vec<Real> = vx.data().iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vx.shape().to_vec(), out)?, rg, Some(Op::Tanh { x }), "tanh")
    }

    /// max(0, x), elementwise.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        let out: Vec<Real> = vx.data().iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vx.shape().to_vec(), out)?, rg, Some(Op::Relu { x }), "relu")
    }

    /// L2-normalize each row (last dimension). Rows with norm below
    /// [`L2_NORM_FLOOR`] are divided by the floor instead.
    pub fn l2norm(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        if vx.ndim() == 0 || vx.last_dim() == 0 {
            return Err(TensorError::shape("l2-normalize", format!("needs a non-empty last dim, got {}", fmt_shape(vx.shape()))));
        }
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            let div = norm.max(L2_NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= div;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vx.shape().to_vec(), out)?, rg, Some(Op::L2Norm { x }), "l2-normalize")
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let total: Real = self.val(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), rg, Some(Op::Sum { x }), "sum")
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        if vx.numel() == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let total: Real = vx.data().iter().sum::<Real>() / vx.numel() as Real;
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), rg, Some(Op::Mean { x }), "mean")
    }

    /// Maximum over the last dimension; the output drops that dimension
    /// (a 1-d input yields a scalar). Gradient flows to the first maximal
    /// element of each row.
    pub fn max_last(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        if vx.ndim() == 0 || vx.last_dim() == 0 {
            return Err(TensorError::shape("max-lastdim", format!("needs a non-empty last dim, got {}", fmt_shape(vx.shape()))));
        }
        let c = vx.last_dim();
        let out: Vec<Real> = vx
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().fold(Real::NEG_INFINITY, Real::max))
            .collect();
        let shape = if vx.ndim() == 1 { vec![1] } else { vx.shape()[..vx.ndim() - 1].to_vec() };
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, rg, Some(Op::MaxLast { x }), "max-lastdim")
    }

    /// Select rows of a 2-d tensor by index (repeats allowed). Gradient
    /// scatter-adds back, so repeated rows accumulate.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        if vx.ndim() != 2 {
            return Err(TensorError::shape("gather", format!("expected a 2-d input, got {}", fmt_shape(vx.shape()))));
        }
        if rows.is_empty() {
            return Err(TensorError::invalid("gather", "empty row index list"));
        }
        let (r, c) = (vx.dim(0), vx.dim(1));
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::invalid("gather", format!("row index {bad} out of range for {} rows", r)));
        }
        let mut out = vec![0.0; rows.len() * c];
        for (k, &i) in rows.iter().enumerate() {
            out[k * c..(k + 1) * c].copy_from_slice(&vx.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            rg,
            Some(Op::GatherRows { x, rows: rows.to_vec() }),
            "gather",
        )
    }

    /// Generalized transpose: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        let n = vx.ndim();
        let mut seen = vec![false; n];
        let valid = perm.len() == n && perm.iter().all(|&a| a < n && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::invalid(
                "transpose",
                format!("{perm:?} is not a permutation of the {n} axes of {}", fmt_shape(vx.shape())),
            ));
        }
        let (shape, data) = permute_data(vx.shape(), vx.data(), perm);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data)?, rg, Some(Op::Permute { x, perm: perm.to_vec() }), "transpose")
    }

    /// 2-d transpose, shorthand for `permute(x, [1, 0])`.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.permute(x, &[1, 0])
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let vx = self.val(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot reshape {} into {}", fmt_shape(vx.shape()), fmt_shape(shape)),
            ));
        }
        let data = vx.data().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape.to_vec(), data)?, rg, Some(Op::Reshape { x }), "reshape")
    }

    /// Mean over rows of `-log softmax(logits)[target]`; the fused form
    /// keeps the backward rule at the textbook `softmax - onehot`.
    pub fn softmax_xent(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId, TensorError> {
        let vl = self.val(logits);
        if vl.ndim() != 2 {
            return Err(TensorError::shape(
                "softmax-xent",
                format!("expected 2-d logits, got {}", fmt_shape(vl.shape())),
            ));
        }
        let (r, c) = (vl.dim(0), vl.dim(1));
        if targets.len() != r {
            return Err(TensorError::invalid(
                "softmax-xent",
                format!("{} targets for {} logit rows", targets.len(), r),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::invalid("softmax-xent", format!("target class {bad} out of range for {c} classes")));
        }
        let mut loss = 0.0;
        for (row, &t) in vl.data().chunks(c).zip(targets) {
            let mut p = row.to_vec();
            softmax_row(&mut p);
            loss -= p[t].max(Real::MIN_POSITIVE).ln();
        }
        loss /= r as Real;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            rg,
            Some(Op::SoftmaxXent { logits, targets: targets.to_vec() }),
            "softmax-xent",
        )
    }

    // ---- composites (built on the primitives above) ----

    /// Repeat a `[1, c]` row `r` times via `ones[r,1] @ v`, the explicit
    /// broadcast used wherever a query vector meets a feature grid.
    pub fn broadcast_rows(&mut self, v: TensorId, r: usize) -> Result<TensorId, TensorError> {
        let c = self.val(v).last_dim();
        let row = self.reshape(v, &[1, c])?;
        let ones = self.constant(Tensor::filled(&[r, 1], 1.0))?;
        self.matmul(ones, row)
    }

    /// Stack equal-length 1-d (or `[1, c]`) tensors as the rows of a
    /// `[k, c]` matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::invalid("stack-rows", "needs at least one row"));
        }
        let c = self.val(rows[0]).numel();
        let mut flat = Vec::with_capacity(rows.len());
        for &r in rows {
            if self.val(r).numel() != c {
                return Err(TensorError::shape(
                    "stack-rows",
                    format!("row lengths differ: {} vs {}", c, self.val(r).numel()),
                ));
            }
            flat.push(self.reshape(r, &[1, c])?);
        }
        let wide = self.concat(&flat)?;
        self.reshape(wide, &[rows.len(), c])
    }

    /// Mean of a list of scalars (loss averaging).
    pub fn mean_scalars(&mut self, terms: &[TensorId]) -> Result<TensorId, TensorError> {
        let stacked = self.stack_rows(terms)?;
        self.mean(stacked)
    }

    /// Dot product of two same-shape tensors (scalar output).
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `root`; adds `∂root/∂leaf` into every
    /// reachable leaf's grad. Deterministic: a fixed traversal order and
    /// plain `+=` accumulation.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        if !self.val(root).is_scalar() {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be scalar, got shape {}", fmt_shape(self.val(root).shape())),
            ));
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match self.nodes[i].op.clone() {
                None => {
                    let slot = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                    for (dst, src) in slot.iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Some(op) => self.backward_op(i, &op, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, op: &Op, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let out = &self.nodes[i].value;
        match op {
            Op::Matmul { a, b } => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                if self.rg(*a) {
                    let da = acc_slot(grads, a.0, m * k);
                    mm_abt_acc(g, vb.data(), m, n, k, da);
                }
                if self.rg(*b) {
                    let db = acc_slot(grads, b.0, k * n);
                    mm_atb_acc(va.data(), g, m, k, n, db);
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let (vx, vw) = (self.val(*x), self.val(*w));
                let c_in = vw.dim(0);
                let c_out = vw.dim(1);
                let rows = vx.numel() / c_in;
                if self.rg(*x) {
                    let dx = acc_slot(grads, x.0, rows * c_in);
                    mm_abt_acc(g, vw.data(), rows, c_out, c_in, dx);
                }
                if self.rg(*w) {
                    let dw = acc_slot(grads, w.0, c_in * c_out);
                    mm_atb_acc(vx.data(), g, rows, c_in, c_out, dw);
                }
                if self.rg(*b) {
                    let db = acc_slot(grads, b.0, c_out);
                    for r in 0..rows {
                        for j in 0..c_out {
                            db[j] += g[r * c_out + j];
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).last_dim();
                    if self.rg(p) {
                        let dp = acc_slot(grads, p.0, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.rg(*id) {
                        let d = acc_slot(grads, id.0, g.len());
                        for (dst, src) in d.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                if self.rg(*x) {
                    let dx = acc_slot(grads, x.0, g.len());
                    for (dst, src) in dx.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.rg(*b) {
                    let c = self.val(*b).numel();
                    let db = acc_slot(grads, b.0, c);
                    for (idx, src) in g.iter().enumerate() {
                        db[idx % c] += src;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    let da = acc_slot(grads, a.0, g.len());
                    for ((dst, src), other) in da.iter_mut().zip(g).zip(vb.data()) {
                        *dst += src * other;
                    }
                }
                if self.rg(*b) {
                    let db = acc_slot(grads, b.0, g.len());
                    for ((dst, src), other) in db.iter_mut().zip(g).zip(va.data()) {
                        *dst += src * other;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let dx = acc_slot(grads, x.0, g.len());
                    for (dst, src) in dx.iter_mut().zip(g) {
                        *dst += src * c;
                    }
                }
            }
            Op::Softmax { x } => {
                if self.rg(*x) {
                    let c = out.last_dim();
                    let dx = acc_slot(grads, x.0, g.len());
                    for r in 0..out.numel() / c {
                        let y = &out.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: Real = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.rg(*x) {
                    let dx = acc_slot(grads, x.0, g.len());
                    for ((dst, src), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *dst += src * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.rg(*x) {
                    let dx = acc_slot(grads, x.0, g.len());
                    for ((dst, src), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *dst += src * (1.0 - y * y);
                    }
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let vx = self.val(*x);
                    let dx = acc_slot(grads, x.0, g.len());
                    for ((dst, src), v) in dx.iter_mut().zip(g).zip(vx.data()) {
                        if *v > 0.0 {
                            *dst += src;
                        }
                    }
                }
            }
            Op::L2Norm { x } => {
                if self.rg(*x) {
                    let vx = self.val(*x);
                    let c = vx.last_dim();
                    let dx = acc_slot(grads, x.0, g.len());
                    for r in 0..vx.numel() / c {
                        let xr = &vx.data()[r * c..(r + 1) * c];
                        let yr = &out.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let norm = xr.iter().map(|v| v * v).sum::<Real>().sqrt();
                        if norm > L2_NORM_FLOOR {
                            let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dx[r * c + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            // Below the floor the op is x / FLOOR, plain linear.
                            for j in 0..c {
                                dx[r * c + j] += gr[j] / L2_NORM_FLOOR;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let n = self.val(*x).numel();
                    let dx = acc_slot(grads, x.0, n);
                    for dst in dx.iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.rg(*x) {
                    let n = self.val(*x).numel();
                    let dx = acc_slot(grads, x.0, n);
                    let share = g[0] / n as Real;
                    for dst in dx.iter_mut() {
                        *dst += share;
                    }
                }
            }
            Op::MaxLast { x } => {
                if self.rg(*x) {
                    let vx = self.val(*x);
                    let c = vx.last_dim();
                    let dx = acc_slot(grads, x.0, vx.numel());
                    for (r, row) in vx.data().chunks(c).enumerate() {
                        let mut best = 0;
                        for (j, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = j;
                            }
                        }
                        dx[r * c + best] += g[r];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.rg(*x) {
                    let vx = self.val(*x);
                    let c = vx.dim(1);
                    let dx = acc_slot(grads, x.0, vx.numel());
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.rg(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (d, &a) in perm.iter().enumerate() {
                        inv[a] = d;
                    }
                    let (_, gx) = permute_data(out.shape(), g, &inv);
                    let dx = acc_slot(grads, x.0, gx.len());
                    for (dst, src) in dx.iter_mut().zip(&gx) {
                        *dst += src;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let dx = acc_slot(grads, x.0, g.len());
                    for (dst, src) in dx.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
            Op::SoftmaxXent { logits, targets } => {
                if self.rg(*logits) {
                    let vl = self.val(*logits);
                    let c = vl.dim(1);
                    let r = vl.dim(0);
                    let dx = acc_slot(grads, logits.0, vl.numel());
                    let share = g[0] / r as Real;
                    for (row_idx, (row, &t)) in vl.data().chunks(c).zip(targets).enumerate() {
                        let mut p = row.to_vec();
                        softmax_row(&mut p);
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dx[row_idx * c + j] += share * (p[j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn acc_slot(grads: &mut [Option<Vec<Real>>], idx: usize, numel: usize) -> &mut [Real] {
    grads[idx].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice()
}

/// In-place stable softmax of one row.
fn softmax_row(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out += a @ b, with a: m x k, b: k x n.
fn mm_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a @ bᵀ, with a: m x n, b: k x n, out: m x k.
fn mm_abt_acc(a: &[Real], b: &[Real], m: usize, n: usize, k: usize, out: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * k + l] += s;
        }
    }
}

/// out += aᵀ @ b, with a: m x k, b: m x n, out: k x n.
fn mm_atb_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
