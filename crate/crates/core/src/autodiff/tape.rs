use std::cell::RefCell;
use std::rc::Rc;

use super::conv;
use super::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to, Tensor,
};
use crate::error::{Error, Result};

/// Recording of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it and
/// the backward sweep is a single reverse pass over the node list. A tape is meant
/// to live for one training step (or one filter step at inference) and then be
/// dropped; it is not `Sync`, but independent tapes can live on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    LogSumExpAxis(usize, usize),
    Softmax(usize, usize),
    Gather {
        input: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it is untracked or unreachable from the root.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `var`, zeros when it did not receive any contribution.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

/// Decomposes `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

/// Applies `f` elementwise over a broadcast pair, with fast paths for the common layouts.
fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if b.numel() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else if out_shape == a.shape() && out_shape.ends_with(b.shape()) {
        ad.chunks(b.numel())
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        let numel = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
        data
    };
    Tensor::new(out_shape, data)
}

/// `c = a · b` for row-major `[m, k] x [k, n]` matrices, optionally transposed views.
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
    // row-major strides of the logical (untransposed) operand views
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices are sized for the given extents and strides.
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if tracked { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var { tape: self, id }
    }

    /// A leaf that receives gradients.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let tracked = parts.iter().any(|p| p.is_tracked());
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[root.id].tracked {
            grads[root.id] = Some(vec![1.0]);
        }

        fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
            if !nodes[id].tracked {
                return;
            }
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                // leaf gradients stay in place for the caller
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let ga = reduce_to(&g, out.shape(), nodes[*a].value.shape());
                    let mut gb = reduce_to(&g, out.shape(), nodes[*b].value.shape());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let is_div = matches!(node.op, Op::Div(..));
                    let shape = out.shape();
                    let sa = broadcast_strides(va.shape(), shape);
                    let sb = broadcast_strides(vb.shape(), shape);
                    let (ad, bd) = (va.data(), vb.data());
                    if nodes[*a].tracked {
                        let mut ga = vec![0.0; out.numel()];
                        for_each_broadcast(shape, &sa, &sb, |o, _, j| {
                            ga[o] = if is_div { g[o] / bd[j] } else { g[o] * bd[j] };
                        });
                        accumulate(&mut grads, &nodes, *a, reduce_to(&ga, shape, va.shape()));
                    }
                    if nodes[*b].tracked {
                        let mut gb = vec![0.0; out.numel()];
                        for_each_broadcast(shape, &sa, &sb, |o, i, j| {
                            gb[o] = if is_div {
                                -g[o] * ad[i] / (bd[j] * bd[j])
                            } else {
                                g[o] * ad[i]
                            };
                        });
                        accumulate(&mut grads, &nodes, *b, reduce_to(&gb, shape, vb.shape()));
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, &nodes, *a, g.iter().map(|v| v * s).collect());
                }
                Op::AddScalar(a) => accumulate(&mut grads, &nodes, *a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if nodes[*a].tracked {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, vb.data(), true, &mut ga, false);
                        accumulate(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[*b].tracked {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, va.data(), true, &g, false, &mut gb, false);
                        accumulate(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (out.shape()[0], out.shape()[1]);
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] = g[i * n + j];
                        }
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Conv2d { input, weight, bias } => {
                    let (vi, vw) = (&nodes[*input].value, &nodes[*weight].value);
                    let back = conv::conv2d_backward(
                        vi,
                        vw,
                        &g,
                        nodes[*input].tracked,
                        nodes[*weight].tracked,
                    );
                    if let Some(gi) = back.input {
                        accumulate(&mut grads, &nodes, *input, gi);
                    }
                    if let Some(gw) = back.weight {
                        accumulate(&mut grads, &nodes, *weight, gw);
                    }
                    if let Some(b) = bias {
                        accumulate(&mut grads, &nodes, *b, back.bias);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut gi = vec![0.0; nodes[*input].value.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g[o];
                    }
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::Relu(a) => {
                    let x = nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Log(a) => {
                    let x = nodes[*a].value.data();
                    let ga = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * 0.5 / y).collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Square(a) => {
                    let x = nodes[*a].value.data();
                    let ga = g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.numel();
                    accumulate(&mut grads, &nodes, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    accumulate(&mut grads, &nodes, *a, vec![g[0] / n as f64; n]);
                }
                Op::SumAxis(a, axis) => {
                    let va = &nodes[*a].value;
                    let (outer, len, inner) = split_axis(va.shape(), *axis);
                    let mut ga = vec![0.0; va.numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                ga[(o * len + j) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::LogSumExpAxis(a, axis) => {
                    let va = &nodes[*a].value;
                    let x = va.data();
                    let lse = out.data();
                    let (outer, len, inner) = split_axis(va.shape(), *axis);
                    let mut ga = vec![0.0; va.numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let idx = (o * len + j) * inner + i;
                                let r = o * inner + i;
                                ga[idx] = g[r] * (x[idx] - lse[r]).exp();
                            }
                        }
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Softmax(a, axis) => {
                    let y = out.data();
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let mut ga = vec![0.0; out.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let dot: f64 = (0..len)
                                .map(|j| {
                                    let idx = (o * len + j) * inner + i;
                                    g[idx] * y[idx]
                                })
                                .sum();
                            for j in 0..len {
                                let idx = (o * len + j) * inner + i;
                                ga[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Gather { input, axis, indices } => {
                    let vi = &nodes[*input].value;
                    let (outer, len, inner) = split_axis(vi.shape(), *axis);
                    let mut gi = vec![0.0; vi.numel()];
                    let k = indices.len();
                    for o in 0..outer {
                        for (j, &src) in indices.iter().enumerate() {
                            for i in 0..inner {
                                gi[(o * len + src) * inner + i] += g[(o * k + j) * inner + i];
                            }
                        }
                    }
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::Concat { inputs, axis } => {
                    let shape = out.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let row = shape[*axis] * inner;
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = nodes[inp].value.shape()[*axis] * inner;
                        if nodes[inp].tracked {
                            let mut gi = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                gi.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                            }
                            accumulate(&mut grads, &nodes, inp, gi);
                        }
                        offset += len;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, &nodes, *a, g),
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Copy of this value that the backward pass does not flow through.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        let tracked = self.is_tracked();
        self.tape.push(value, op, tracked)
    }

    fn binary(&self, rhs: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let tracked = self.is_tracked() || rhs.is_tracked();
        self.tape.push(value, op, tracked)
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("add", &self.value(), &rhs.value(), |a, b| a + b)?;
        Ok(self.binary(rhs, Op::Add(self.id, rhs.id), v))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("sub", &self.value(), &rhs.value(), |a, b| a - b)?;
        Ok(self.binary(rhs, Op::Sub(self.id, rhs.id), v))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("mul", &self.value(), &rhs.value(), |a, b| a * b)?;
        Ok(self.binary(rhs, Op::Mul(self.id, rhs.id), v))
    }

    pub fn div(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("div", &self.value(), &rhs.value(), |a, b| a / b)?;
        Ok(self.binary(rhs, Op::Div(self.id, rhs.id), v))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(Op::Scale(self.id, s), v)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar(self.id), v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        let v = Tensor::new([m, n], c)?;
        Ok(self.binary(rhs, Op::MatMul(self.id, rhs.id), v))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::invalid(format!("transpose needs a matrix, got {:?}", a.shape())));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut d = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = a.data()[i * n + j];
            }
        }
        Ok(self.unary(Op::Transpose(self.id), Tensor::new([n, m], d)?))
    }

    /// Stride-1 "same" convolution: `[B, Cin, H, W] * [Cout, Cin, k, k] -> [B, Cout, H, W]`.
    pub fn conv2d(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let v = conv::conv2d_forward(&self.value(), &weight.value(), bias.map(|b| b.value()).as_deref())?;
        let tracked =
            self.is_tracked() || weight.is_tracked() || bias.is_some_and(|b| b.is_tracked());
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
            },
            tracked,
        ))
    }

    /// 2x2 max pooling with stride 2 on `[B, C, H, W]`; odd extents are floored.
    pub fn maxpool2x2(&self) -> Result<Var<'t>> {
        let (v, argmax) = conv::maxpool2x2(&self.value())?;
        Ok(self.unary(Op::MaxPool2 { input: self.id, argmax }, v))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(Op::Relu(self.id), v)
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn log(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(Op::Log(self.id), v)
    }

    pub fn sqrt(&self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(Op::Clamp(self.id, lo, hi), v)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.unary(Op::Mean(self.id), Tensor::scalar(s))
    }

    fn check_axis(&self, op: &str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("{op}: axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let shape = self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + j) * inner + i];
                }
            }
        }
        let v = Tensor::new(reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.unary(Op::SumAxis(self.id, axis), v))
    }

    /// Overflow-safe `log(sum(exp(x)))` along `axis`.
    pub fn logsumexp_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let shape = self.check_axis("logsumexp_axis", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let x = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| x[(o * len + j) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    m + (0..len).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let v = Tensor::new(reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.unary(Op::LogSumExpAxis(self.id, axis), v))
    }

    /// `logsumexp` over every element, as a scalar.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        self.reshape([self.numel()])?.logsumexp_axis(0, false)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let x = x.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|j| (x[idx(j)] - m).exp()).sum();
                for j in 0..len {
                    out[idx(j)] = (x[idx(j)] - m).exp() / z;
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.unary(Op::Softmax(self.id, axis), v))
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.check_axis("gather", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for axis {axis} of {shape:?}"
            )));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &src in indices {
                let start = (o * len + src) * inner;
                out.extend_from_slice(&x.data()[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let v = Tensor::new(out_shape, out)?;
        Ok(self.unary(
            Op::Gather {
                input: self.id,
                axis,
                indices: indices.to_vec(),
            },
            v,
        ))
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(axis, &idx)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let v = self.value();
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape("reshape", v.shape(), &shape));
        }
        let v = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }
}
