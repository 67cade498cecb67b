//! Eager computation graph with reverse-mode gradients.
//!
//! Every op evaluates immediately and appends a node; node order is therefore
//! a topological order and `backward` simply walks it in reverse.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use super::params::ParameterStore;
use super::tensor::Tensor;
use super::EngineError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable function. The forward value is computed
/// by the caller and handed to [`Graph::custom`]; the op only supplies the
/// vector-Jacobian product.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output. `None`
    /// means the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Tanh { x: Var },
    Softmax { x: Var, axis: usize },
    Normalize { x: Var, axes: Range<usize>, mean: Vec<f64>, var: Vec<f64>, inv_std: Vec<f64> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Sum { x: Var },
    Detach,
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::Normalize { .. } => "normalize",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Sum { .. } => "sum",
            Op::Detach => "detach",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Detach => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b } | Op::Concat { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Tanh { x }
            | Op::Softmax { x, .. }
            | Op::Normalize { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// `C = op(A) * op(B)` (or `C += ...`) for row-major buffers, where `A` is
/// logically `m x k` and `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the buffers hold exactly m*k, k*n and m*n elements and the
    // strides describe row-major (or transposed row-major) layouts of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (p, q) = (shape[r - 2], shape[r - 1]);
    let batch: usize = shape[..r - 2].iter().product();
    let mut out = vec![0.0; t.len()];
    let src = t.data();
    for b in 0..batch {
        let off = b * p * q;
        for i in 0..p {
            for j in 0..q {
                out[off + j * p + i] = src[off + i * q + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Tensor::new(new_shape, out).expect("same element count")
}

fn mismatch(op: &'static str, detail: String) -> EngineError {
    EngineError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, EngineError> {
        if let Some((index, v)) = value.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EngineError::NonFinite { op: op.name(), index, value: *v, shape: value.shape().to_vec() });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var, EngineError> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].needs_grad = needs_grad;
        Ok(v)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, EngineError> {
        self.leaf(value, false)
    }

    /// Input marked for differentiation.
    pub fn variable(&mut self, value: Tensor) -> Result<Var, EngineError> {
        self.leaf(value, true)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls with the same
    /// name return the same node.
    pub fn parameter(&mut self, store: &ParameterStore, name: &str) -> Result<Var, EngineError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name).ok_or_else(|| EngineError::UnknownParameter(name.to_string()))?;
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Mean and (biased) variance from a normalization node.
    pub fn normalization_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Normalize { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Per-point affine map shared across all leading axes:
    /// `x (.., d_in) * w (d_in, d_out) + b (d_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, EngineError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(mismatch("linear", format!("x {:?} w {:?}", xs, ws)));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(mismatch("linear", format!("bias {:?} for d_out {}", bv.shape(), dout)));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }

    /// Batched product `(B, p, q) x (B, q, r) -> (B, p, r)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (bn, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bn * p * r];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bn {
            gemm(
                p,
                q,
                r,
                &ad[i * p * q..(i + 1) * p * q],
                false,
                &bd[i * q * r..(i + 1) * q * r],
                false,
                &mut out[i * p * r..(i + 1) * p * r],
                false,
            );
        }
        self.push(Tensor::new(vec![bn, p, r], out)?, Op::MatMul { a, b })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, EngineError> {
        if self.value(x).rank() < 2 {
            return Err(mismatch("transpose", format!("{:?}", self.value(x).shape())));
        }
        let t = transpose_last2(self.value(x));
        self.push(t, Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat", format!("{:?} ++ {:?}", sa, sb)));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).len() / da.max(1);
        let mut out = Vec::with_capacity(rows * (da + db));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        self.push(Tensor::new(shape, out)?, Op::Concat { a, b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, EngineError> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(t, Op::Scale { x, c })
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var, EngineError> {
        let data = self.value(x).data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(t, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, EngineError> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(t, Op::Tanh { x })
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(mismatch("softmax", format!("axis {} of {:?}", axis, xv.shape())));
        }
        let (outer, len, inner) = xv.split_axes(&(axis..axis + 1));
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[idx(l)] /= sum;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis })
    }

    /// Subtracts the mean and divides by `sqrt(var + eps)`, with statistics
    /// taken over the contiguous axis range `axes` (one group per index of
    /// the remaining axes).
    pub fn normalize(&mut self, x: Var, axes: Range<usize>, eps: f64) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if axes.start >= axes.end || axes.end > xv.rank() {
            return Err(mismatch("normalize", format!("axes {:?} of {:?}", axes, xv.shape())));
        }
        let (outer, len, inner) = xv.split_axes(&axes);
        let src = xv.data();
        let groups = outer * inner;
        let mut mean = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            let base = o * len * inner;
            let g0 = o * inner;
            for l in 0..len {
                let row = &src[base + l * inner..base + (l + 1) * inner];
                for (m, v) in mean[g0..g0 + inner].iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean[g0..g0 + inner] {
                *m /= len as f64;
            }
            for l in 0..len {
                let row = &src[base + l * inner..base + (l + 1) * inner];
                for i in 0..inner {
                    let d = row[i] - mean[g0 + i];
                    var[g0 + i] += d * d;
                }
            }
            for i in 0..inner {
                var[g0 + i] /= len as f64;
                inv_std[g0 + i] = 1.0 / (var[g0 + i] + eps).sqrt();
            }
            for l in 0..len {
                let off = base + l * inner;
                for i in 0..inner {
                    out[off + i] = (src[off + i] - mean[g0 + i]) * inv_std[g0 + i];
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Normalize { x, axes, mean, var, inv_std })
    }

    /// `x * scale + shift` per channel (last axis).
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, EngineError> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| mismatch("channel_affine", "scalar input".into()))?;
        if self.value(scale).shape() != [d] || self.value(shift).shape() != [d] {
            return Err(mismatch(
                "channel_affine",
                format!("x {:?} scale {:?} shift {:?}", xs, self.value(scale).shape(), self.value(shift).shape()),
            ));
        }
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(sc).zip(sh).map(|((v, a), b)| v * a + b))
            .collect();
        self.push(Tensor::new(xs, data)?, Op::ChannelAffine { x, scale, shift })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, EngineError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x).clone();
        self.push(t, Op::Detach)
    }

    /// Registers a custom-gradient node whose forward value was computed by
    /// the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var, EngineError> {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse-mode gradients of a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, EngineError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(EngineError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.vjp(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let params = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (din, dout) = (ws[0], ws[1]);
                let rows = val(*x).len() / din;
                let mut out = Vec::new();
                if need(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(rows, dout, din, gd, false, val(*w).data(), true, &mut dx, false);
                    out.push((*x, like(*x, dx)));
                }
                if need(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, rows, dout, val(*x).data(), true, gd, false, &mut dw, false);
                    out.push((*w, like(*w, dw)));
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut db = vec![0.0; dout];
                        for row in gd.chunks(dout) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        out.push((*b, like(*b, db)));
                    }
                }
                out
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bn, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
                let mut out = Vec::new();
                if need(*a) {
                    let mut da = vec![0.0; bn * p * q];
                    for i in 0..bn {
                        gemm(
                            p,
                            r,
                            q,
                            &gd[i * p * r..(i + 1) * p * r],
                            false,
                            &val(*b).data()[i * q * r..(i + 1) * q * r],
                            true,
                            &mut da[i * p * q..(i + 1) * p * q],
                            false,
                        );
                    }
                    out.push((*a, like(*a, da)));
                }
                if need(*b) {
                    let mut db = vec![0.0; bn * q * r];
                    for i in 0..bn {
                        gemm(
                            q,
                            p,
                            r,
                            &val(*a).data()[i * p * q..(i + 1) * p * q],
                            true,
                            &gd[i * p * r..(i + 1) * p * r],
                            false,
                            &mut db[i * q * r..(i + 1) * q * r],
                            false,
                        );
                    }
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Transpose { x } => vec![(*x, transpose_last2(g))],
            Op::Reshape { x } => vec![(*x, like(*x, gd.to_vec()))],
            Op::Concat { a, b } => {
                let da = *val(*a).shape().last().unwrap();
                let db = *val(*b).shape().last().unwrap();
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                for row in gd.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let ga = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Scale { x, c } => vec![(*x, like(*x, gd.iter().map(|v| v * c).collect()))],
            Op::Relu { x } => {
                let gx = gd.iter().zip(val(*x).data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                vec![(*x, like(*x, gx))]
            }
            Op::Tanh { x } => {
                let gx = gd.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![(*x, like(*x, gx))]
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = y.split_axes(&(*axis..*axis + 1));
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| o * len * inner + l * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[idx(l)] * yd[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = yd[idx(l)] * (gd[idx(l)] - dot);
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Normalize { x, axes, inv_std, .. } => {
                // dx = s (dy - mean(dy) - y mean(dy y)), with y the normalized output.
                let y = &node.value;
                let (outer, len, inner) = y.split_axes(axes);
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                let n = len as f64;
                for o in 0..outer {
                    let base = o * len * inner;
                    let mut mg = vec![0.0; inner];
                    let mut mgy = vec![0.0; inner];
                    for l in 0..len {
                        let off = base + l * inner;
                        for i in 0..inner {
                            mg[i] += gd[off + i];
                            mgy[i] += gd[off + i] * yd[off + i];
                        }
                    }
                    for i in 0..inner {
                        mg[i] /= n;
                        mgy[i] /= n;
                    }
                    for l in 0..len {
                        let off = base + l * inner;
                        for i in 0..inner {
                            gx[off + i] = inv_std[o * inner + i] * (gd[off + i] - mg[i] - yd[off + i] * mgy[i]);
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::ChannelAffine { x, scale, shift } => {
                let d = val(*scale).len();
                let sc = val(*scale).data();
                let xd = val(*x).data();
                let mut out = Vec::new();
                if need(*x) {
                    let gx = gd.chunks(d).flat_map(|row| row.iter().zip(sc).map(|(g, a)| g * a)).collect();
                    out.push((*x, like(*x, gx)));
                }
                if need(*scale) || need(*shift) {
                    let mut gs = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (grow, xrow) in gd.chunks(d).zip(xd.chunks(d)) {
                        for i in 0..d {
                            gs[i] += grow[i] * xrow[i];
                            gb[i] += grow[i];
                        }
                    }
                    out.push((*scale, like(*scale, gs)));
                    out.push((*shift, like(*shift, gb)));
                }
                out
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                op.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, v)| gi.map(|t| (*v, t)))
                    .collect()
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of a leaf (input or parameter). `None` when no gradient
    /// reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter used in the graph, keyed by name.
    /// Parameters the loss does not depend on are reported as zeros.
    pub fn parameters(&self, store: &ParameterStore) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(name, _)| store.get(name).is_some_and(|p| p.trainable))
            .map(|(name, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("known").value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        // Keep entries away from the ReLU kink so central differences are valid.
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < 1e-2 {
                0.5
            } else {
                v
            }
        })
    }

    type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, EngineError>;

    /// Projects the op output onto a fixed random direction and compares the
    /// input gradients against central differences.
    fn sweep(name: &str, shapes: &[Vec<usize>], build: &Build) {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let mut probe_graph = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|x| probe_graph.variable(x.clone()).unwrap()).collect();
            let out = build(&mut probe_graph, &vars).unwrap();
            let dir = random(&mut rng, probe_graph.value(out).shape());

            let eval = |xs: &[Tensor]| -> f64 {
                let mut g = Graph::new();
                let vs: Vec<Var> = xs.iter().map(|x| g.variable(x.clone()).unwrap()).collect();
                let o = build(&mut g, &vs).unwrap();
                g.value(o).data().iter().zip(dir.data()).map(|(a, b)| a * b).sum()
            };

            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone()).unwrap()).collect();
            let o = build(&mut g, &vs).unwrap();
            let d = g.constant(dir.clone()).unwrap();
            let p = g.mul(o, d).unwrap();
            let loss = g.sum(p).unwrap();
            let grads = g.backward(loss).unwrap();

            for (k, x) in inputs.iter().enumerate() {
                let analytic = grads.wrt(vs[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
                let report = finite_difference_check(
                    |flat| {
                        let mut xs = inputs.clone();
                        xs[k] = Tensor::new(x.shape().to_vec(), flat.to_vec()).unwrap();
                        eval(&xs)
                    },
                    x.data(),
                    &analytic,
                    1e-5,
                );
                assert!(report.max_rel_error < 1e-4, "{name} seed {seed} input {k}: {report:?}");
            }
        }
    }

    struct Square;
    impl CustomOp for Square {
        fn name(&self) -> &'static str {
            "square"
        }
        fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
            let data = inputs[0].data().iter().zip(grad.data()).map(|(x, g)| 2.0 * x * g).collect();
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), data).unwrap())]
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        sweep("linear", &[vec![2, 5, 3], vec![3, 4], vec![4]], &|g, v| g.linear(v[0], v[1], Some(v[2])));
        sweep("linear_nobias", &[vec![6, 3], vec![3, 2]], &|g, v| g.linear(v[0], v[1], None));
        sweep("matmul", &[vec![2, 3, 4], vec![2, 4, 5]], &|g, v| g.matmul(v[0], v[1]));
        sweep("transpose", &[vec![2, 3, 4]], &|g, v| g.transpose(v[0]));
        sweep("reshape", &[vec![2, 6]], &|g, v| g.reshape(v[0], &[3, 4]));
        sweep("concat", &[vec![2, 3, 2], vec![2, 3, 4]], &|g, v| g.concat(v[0], v[1]));
        sweep("add", &[vec![3, 4], vec![3, 4]], &|g, v| g.add(v[0], v[1]));
        sweep("mul", &[vec![3, 4], vec![3, 4]], &|g, v| g.mul(v[0], v[1]));
        sweep("scale", &[vec![5]], &|g, v| g.scale(v[0], -1.7));
        sweep("relu", &[vec![4, 5]], &|g, v| g.relu(v[0]));
        sweep("tanh", &[vec![4, 5]], &|g, v| g.tanh(v[0]));
        for axis in 0..3 {
            sweep("softmax", &[vec![2, 3, 4]], &move |g, v| g.softmax(v[0], axis));
        }
        sweep("normalize_points", &[vec![2, 6, 3]], &|g, v| g.normalize(v[0], 1..2, 1e-5));
        sweep("normalize_batch_points", &[vec![2, 6, 3]], &|g, v| g.normalize(v[0], 0..2, 1e-5));
        sweep("channel_affine", &[vec![2, 4, 3], vec![3], vec![3]], &|g, v| g.channel_affine(v[0], v[1], v[2]));
        sweep("sum", &[vec![3, 2]], &|g, v| g.sum(v[0]));
        sweep("custom", &[vec![7]], &|g, v| {
            let out = Tensor::new(vec![7], g.value(v[0]).data().iter().map(|x| x * x).collect()).unwrap();
            g.custom(&[v[0]], out, Box::new(Square))
        });
    }

    #[test]
    fn three_layer_graph_matches_finite_differences() {
        // A bias directly before a normalization has an identically zero
        // gradient, so the bias sits on the second layer.
        sweep("mlp", &[vec![1, 8, 4], vec![4, 6], vec![5], vec![6, 5], vec![5, 1]], &|g, v| {
            let h = g.linear(v[0], v[1], None)?;
            let h = g.normalize(h, 1..2, 1e-5)?;
            let h = g.relu(h)?;
            let h = g.linear(h, v[3], Some(v[2]))?;
            let h = g.tanh(h)?;
            g.linear(h, v[4], None)
        });
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = g.constant(Tensor::zeros(&[3])).unwrap();
        let s = g.softmax(z, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[1, 3, 4]);
        let eye = g.constant(Tensor::from_fn(&[1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 })).unwrap();
        let av = g.constant(a.clone()).unwrap();
        let p = g.matmul(eye, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[0.0, 1.0, -1.0])).unwrap();
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[2, 3, 4], 0.3)).unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(d, d).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).is_none());

        // Mixed path: only the attached branch contributes.
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(d, x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(g.add(a, b), Err(EngineError::ShapeMismatch { op: "add", .. })));
        assert!(matches!(g.backward(a), Err(EngineError::NonScalarLoss(_))));
        let big = g.constant(Tensor::full(&[1], 1e200)).unwrap();
        let err = g.mul(big, big).unwrap_err();
        assert!(matches!(err, EngineError::NonFinite { op: "mul", .. }), "{err}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let x = g.variable(random(&mut rng, &[2, 9, 4])).unwrap();
            let w = g.variable(random(&mut rng, &[4, 4])).unwrap();
            let h = g.linear(x, w, None).unwrap();
            let h = g.normalize(h, 1..2, 1e-5).unwrap();
            let h = g.softmax(h, 1).unwrap();
            let l = g.sum(h).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(h).clone(), grads.wrt(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParameterStore::new();
        store.insert("w", t(&[1, 1], &[2.0]), true);
        store.insert("frozen", t(&[1], &[1.0]), false);
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1], &[3.0])).unwrap();
        let w1 = g.parameter(&store, "w").unwrap();
        let w2 = g.parameter(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let f = g.parameter(&store, "frozen").unwrap();
        let h = g.linear(x, w1, Some(f)).unwrap();
        let h = g.linear(h, w2, None).unwrap();
        let l = g.sum(h).unwrap();
        let grads = g.backward(l).unwrap().parameters(&store);
        // l = w * (3w + 1) -> dl/dw = 6w + 1
        assert_eq!(grads["w"].item(), 13.0);
        assert!(!grads.contains_key("frozen"));
    }
}
