use std::rc::Rc;

use super::broadcast::{binary, reduce_to};
use super::fault::{self, Fault};
use super::gemm::{gemm, MatRef};
use super::tape::{CustomOp, Node, Var};
use super::{conv, grid_sample, strides, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, Scalar),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Clamp { x: usize, lo: Scalar, hi: Scalar },
    MatMul { a: usize, b: usize },
    Permute { x: usize, perm: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: Option<usize>, beta: Option<usize>, eps: Scalar },
    NormalizeLast { x: usize, eps: Scalar },
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, indices: Rc<[usize]> },
    GridSample { values: usize, pts: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Upsample2x(usize),
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

impl Op {
    pub fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul { a, b } => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Relu(x) | Sigmoid(x) | Exp(x) | Log(x) | Sqrt(x)
            | Square(x) | Reshape(x) | Sum(x) | Upsample2x(x) => vec![*x],
            Clamp { x, .. }
            | Permute { x, .. }
            | SumAxis { x, .. }
            | Softmax { x, .. }
            | NormalizeLast { x, .. }
            | Narrow { x, .. }
            | IndexSelect { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => {
                std::iter::once(*x).chain(*gamma).chain(*beta).collect()
            }
            Concat { xs, .. } => xs.clone(),
            GridSample { values, pts } => vec![*values, *pts],
            Conv2d { x, w, b, .. } => std::iter::once(*x).chain(std::iter::once(*w)).chain(*b).collect(),
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return dim_err(op, format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn same_tape(a: Var<'_>, b: Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "operands live on different tapes");
}

fn unary<'t>(x: Var<'t>, f: impl Fn(Scalar) -> Scalar, op: Op) -> Var<'t> {
    let out = x.value().map(f);
    x.tape.record(out, op)
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other);
        let out = binary("add", &self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.tape.record(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other);
        let out = binary("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.tape.record(out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other);
        let out = binary("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.tape.record(out, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other);
        let out = binary("div", &self.value(), &other.value(), |a, b| a / b)?;
        Ok(self.tape.record(out, Op::Div(self.id, other.id)))
    }

    pub fn scale(self, c: Scalar) -> Result<Var<'t>> {
        Ok(unary(self, |x| c * x, Op::Scale(self.id, c)))
    }

    pub fn add_scalar(self, c: Scalar) -> Result<Var<'t>> {
        Ok(unary(self, |x| x + c, Op::AddScalar(self.id)))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        Ok(unary(self, |x| x.max(0.0), Op::Relu(self.id)))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        Ok(unary(self, sigmoid, Op::Sigmoid(self.id)))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        Ok(unary(self, Scalar::exp, Op::Exp(self.id)))
    }

    pub fn log(self) -> Result<Var<'t>> {
        Ok(unary(self, Scalar::ln, Op::Log(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        Ok(unary(self, Scalar::sqrt, Op::Sqrt(self.id)))
    }

    pub fn square(self) -> Result<Var<'t>> {
        Ok(unary(self, |x| x * x, Op::Square(self.id)))
    }

    pub fn clamp(self, lo: Scalar, hi: Scalar) -> Result<Var<'t>> {
        Ok(unary(self, |x| x.clamp(lo, hi), Op::Clamp { x: self.id, lo, hi }))
    }

    /// `[..., M, K] x [K, N]` or batched `[..., M, K] x [..., K, N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other);
        let (a, b) = (self.value(), other.value());
        let out = matmul_forward(&a, &b)?;
        Ok(self.tape.record(out, Op::MatMul { a: self.id, b: other.id }))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return dim_err("permute", format!("{perm:?} is not a permutation of the axes of {:?}", x.shape()));
        }
        let out = permute_tensor(&x, perm);
        Ok(self.tape.record(out, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.value().rank();
        if r < 2 {
            return dim_err("transpose", "needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Result<Var<'t>> {
        let s: Scalar = self.value().data().iter().sum();
        Ok(self.tape.record(Tensor::scalar(s), Op::Sum(self.id)))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as Scalar;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for k in 0..len {
                let src = &xd[(o * len + k) * inner..][..inner];
                for (d, s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.tape.record(Tensor::from_parts(shape, data), Op::SumAxis { x: self.id, axis }))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let axis = if fault::is_active(Fault::SoftmaxAxis) {
            (axis + x.rank() - 1) % x.rank()
        } else {
            axis
        };
        let out = softmax_forward(&x, axis);
        Ok(self.tape.record(out, Op::Softmax { x: self.id, axis }))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance, then
    /// applies the optional affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Option<Var<'t>>, beta: Option<Var<'t>>, eps: Scalar) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if p.shape() != [c] {
                    return dim_err("layer_norm", format!("{name} has shape {:?}, expected [{c}]", p.shape()));
                }
            }
        }
        let g = gamma.map(|v| v.value());
        let b = beta.map(|v| v.value());
        let mut out = vec![0.0; x.numel()];
        for (row, o) in x.data().chunks(c).zip(out.chunks_mut(c)) {
            let (mean, rstd) = moments(row, eps);
            for k in 0..c {
                let mut y = (row[k] - mean) * rstd;
                if let Some(g) = &g {
                    y *= g.data()[k];
                }
                if let Some(b) = &b {
                    y += b.data()[k];
                }
                o[k] = y;
            }
        }
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.map(|v| v.id),
            beta: beta.map(|v| v.id),
            eps,
        };
        Ok(self.tape.record(Tensor::from_parts(x.shape().to_vec(), out), op))
    }

    /// L2-normalizes the last axis. Rows with norm below `eps` map to the
    /// first basis vector.
    pub fn normalize_last(self, eps: Scalar) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        let mut out = vec![0.0; x.numel()];
        for (row, o) in x.data().chunks(c).zip(out.chunks_mut(c)) {
            let n = row.iter().map(|v| v * v).sum::<Scalar>().sqrt();
            if n < eps {
                o[0] = 1.0;
            } else {
                for (y, v) in o.iter_mut().zip(row) {
                    *y = v / n;
                }
            }
        }
        Ok(self
            .tape
            .record(Tensor::from_parts(x.shape().to_vec(), out), Op::NormalizeLast { x: self.id, eps }))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        if len == 0 || start + len > x.shape()[axis] {
            return dim_err(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of size {}", start + len, x.shape()[axis]),
            );
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self
            .tape
            .record(Tensor::from_parts(shape, data), Op::Narrow { x: self.id, axis, start }))
    }

    /// Gathers rows along axis 0. Indices may repeat.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rows = x.shape()[0];
        if indices.is_empty() {
            return dim_err("index_select", "empty index list");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return dim_err("index_select", format!("index {bad} out of range for axis 0 of size {rows}"));
        }
        let inner = x.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * inner..][..inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        Ok(self.tape.record(
            Tensor::from_parts(shape, data),
            Op::IndexSelect {
                x: self.id,
                indices: indices.into(),
            },
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Dimension {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for (i, v) in values.iter().enumerate() {
            same_tape(*first, parts[i]);
            let s = v.shape();
            if s.len() != base.len() || (0..s.len()).any(|a| a != axis && s[a] != base[a]) {
                return dim_err("concat", format!("input {i} has shape {s:?}, incompatible with {base:?} off axis {axis}"));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..][..len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(first.tape.record(
            Tensor::from_parts(shape, data),
            Op::Concat {
                xs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    pub(crate) fn record_grid_sample(values: Var<'t>, pts: Var<'t>, out: Tensor) -> Var<'t> {
        same_tape(values, pts);
        values.tape.record(out, Op::GridSample { values: values.id, pts: pts.id })
    }

    pub(crate) fn record_conv2d(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize, out: Tensor) -> Var<'t> {
        x.tape.record(
            out,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
        )
    }

    pub(crate) fn record_upsample(x: Var<'t>, out: Tensor) -> Var<'t> {
        x.tape.record(out, Op::Upsample2x(x.id))
    }
}

/// `y = x·W + b` over the last axis of `x`, broadcast across leading axes.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.len() != 2 {
        return dim_err("linear", format!("weight must be [Cin, Cout], got {ws:?}"));
    }
    let cin = *xs.last().unwrap();
    if cin != ws[0] {
        return dim_err(
            "linear",
            format!("last axis of input (axis {}, size {cin}) != axis 0 of weight (size {})", xs.len() - 1, ws[0]),
        );
    }
    if let Some(b) = b {
        if b.shape() != [ws[1]] {
            return dim_err("linear", format!("bias shape {:?} != [Cout={}]", b.shape(), ws[1]));
        }
    }
    let rows = x.value().numel() / cin;
    let y = x.reshape(&[rows, cin])?.matmul(w)?;
    let y = match b {
        Some(b) => y.add(b)?,
        None => y,
    };
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = ws[1];
    y.reshape(&out_shape)
}

pub(crate) fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn moments(row: &[Scalar], eps: Scalar) -> (Scalar, Scalar) {
    let c = row.len() as Scalar;
    let mean = row.iter().sum::<Scalar>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

/// (product of axes before, size of axis, product of axes after)
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[at(k)]).fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (xd[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return dim_err("matmul", format!("operands need rank >= 2, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return dim_err(
            "matmul",
            format!("axis {} of lhs {a:?} (size {k}) != axis {} of rhs {b:?} (size {kb})", a.len() - 1, b.len() - 2),
        );
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_rhs = b.len() == 2;
    if !shared_rhs && a[..a.len() - 2] != b[..b.len() - 2] {
        return dim_err("matmul", format!("batch axes differ: {a:?} vs {b:?}"));
    }
    Ok((batch, m, k, n, shared_rhs))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * m * n];
    if shared {
        // Fold the batch into the row axis.
        gemm(
            MatRef::row_major(a.data(), batch * m, k),
            MatRef::row_major(b.data(), k, n),
            &mut out,
            0.0,
        );
    } else {
        for i in 0..batch {
            gemm(
                MatRef::row_major(&a.data()[i * m * k..][..m * k], m, k),
                MatRef::row_major(&b.data()[i * k * n..][..k * n], k, n),
                &mut out[i * m * n..][..m * n],
                0.0,
            );
        }
    }
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    if shared {
        let gm = MatRef::row_major(g.data(), batch * m, n);
        gemm(gm, MatRef::row_major(b.data(), k, n).t(), &mut ga, 0.0);
        gemm(MatRef::row_major(a.data(), batch * m, k).t(), gm, &mut gb, 0.0);
    } else {
        for i in 0..batch {
            let gm = MatRef::row_major(&g.data()[i * m * n..][..m * n], m, n);
            let am = MatRef::row_major(&a.data()[i * m * k..][..m * k], m, k);
            let bm = MatRef::row_major(&b.data()[i * k * n..][..k * n], k, n);
            gemm(gm, bm.t(), &mut ga[i * m * k..][..m * k], 0.0);
            gemm(am.t(), gm, &mut gb[i * k * n..][..k * n], 0.0);
        }
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.numel() {
        out.push(xd[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Scalar, Scalar) -> Scalar) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn backward(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let y = &*node.value;
    use Op::*;
    Ok(match &node.op {
        Leaf => vec![],
        Add(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(g, val(*b).shape())),
        ],
        Sub(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(&g.map(|v| -v), val(*b).shape())),
        ],
        Mul(a, b) => {
            let ga = binary("mul", g, val(*b), |x, y| x * y)?;
            let gb = binary("mul", g, val(*a), |x, y| x * y)?;
            vec![(*a, reduce_to(&ga, val(*a).shape())), (*b, reduce_to(&gb, val(*b).shape()))]
        }
        Div(a, b) => {
            let ga = binary("div", g, val(*b), |x, y| x / y)?;
            let gy = zip_map(g, y, |gv, yv| -gv * yv);
            let gb = binary("div", &gy, val(*b), |x, y| x / y)?;
            vec![(*a, reduce_to(&ga, val(*a).shape())), (*b, reduce_to(&gb, val(*b).shape()))]
        }
        Scale(x, c) => vec![(*x, g.map(|v| c * v))],
        AddScalar(x) | Reshape(x) => vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec()))],
        Relu(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
        Sigmoid(x) => vec![(*x, zip_map(g, y, |gv, s| gv * s * (1.0 - s)))],
        Exp(x) => vec![(*x, zip_map(g, y, |gv, e| gv * e))],
        Log(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv / xv))],
        Sqrt(x) => vec![(*x, zip_map(g, y, |gv, s| gv / (2.0 * s)))],
        Square(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| 2.0 * gv * xv))],
        Clamp { x, lo, hi } => vec![(
            *x,
            zip_map(g, val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }),
        )],
        MatMul { a, b } => {
            let (ga, gb) = matmul_backward(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Permute { x, perm } => vec![(*x, permute_tensor(g, &inverse_perm(perm)))],
        Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
        SumAxis { x, axis } => {
            let xs = val(*x).shape();
            let (outer, len, inner) = split_axis(xs, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    out.extend_from_slice(&g.data()[o * inner..][..inner]);
                }
            }
            vec![(*x, Tensor::from_parts(xs.to_vec(), out))]
        }
        Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut out = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: Scalar = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
                    for k in 0..len {
                        out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![(*x, Tensor::from_parts(y.shape().to_vec(), out))]
        }
        LayerNorm { x, gamma, beta, eps } => layer_norm_backward(val(*x), gamma.map(val), *gamma, *beta, *eps, *x, g),
        NormalizeLast { x, eps } => {
            let xv = val(*x);
            let c = *xv.shape().last().unwrap();
            let mut out = vec![0.0; xv.numel()];
            for ((row, yr), (gr, o)) in xv
                .data()
                .chunks(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c).zip(out.chunks_mut(c)))
            {
                let n = row.iter().map(|v| v * v).sum::<Scalar>().sqrt();
                if n < *eps {
                    continue;
                }
                let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    o[k] = (gr[k] - yr[k] * dot) / n;
                }
            }
            vec![(*x, Tensor::from_parts(xv.shape().to_vec(), out))]
        }
        Concat { xs, axis } => {
            let outer: usize = y.shape()[..*axis].iter().product();
            let inner: usize = y.shape()[axis + 1..].iter().product();
            let total = y.shape()[*axis];
            let mut offset = 0;
            let mut res = Vec::with_capacity(xs.len());
            for &xi in xs {
                let s = val(xi).shape();
                let len = s[*axis] * inner;
                let mut data = Vec::with_capacity(outer * len);
                for o in 0..outer {
                    data.extend_from_slice(&g.data()[o * total * inner + offset..][..len]);
                }
                offset += len;
                res.push((xi, Tensor::from_parts(s.to_vec(), data)));
            }
            res
        }
        Narrow { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, full, inner) = split_axis(xs, *axis);
            let len = y.shape()[*axis];
            let mut data = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                data[(o * full + start) * inner..][..len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
            }
            vec![(*x, Tensor::from_parts(xs.to_vec(), data))]
        }
        IndexSelect { x, indices } => {
            let xs = val(*x).shape();
            let inner = val(*x).numel() / xs[0];
            let mut data = vec![0.0; val(*x).numel()];
            for (r, &i) in indices.iter().enumerate() {
                for (d, s) in data[i * inner..][..inner].iter_mut().zip(&g.data()[r * inner..][..inner]) {
                    *d += s;
                }
            }
            vec![(*x, Tensor::from_parts(xs.to_vec(), data))]
        }
        GridSample { values, pts } => {
            let (gv, gp) = grid_sample::backward(val(*values), val(*pts), g);
            vec![(*values, gv), (*pts, gp)]
        }
        Conv2d { x, w, b, stride, pad } => {
            let (gx, gw, gb) = conv::conv2d_backward(val(*x), val(*w), g, *stride, *pad);
            let mut res = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                res.push((*b, gb));
            }
            res
        }
        Upsample2x(x) => vec![(*x, conv::upsample2x_backward(g))],
        Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let grads = op.backward(&ins, y, g)?;
            if grads.len() != inputs.len() {
                return Err(Error::Contract(format!(
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            inputs
                .iter()
                .zip(grads)
                .filter_map(|(&i, gi)| gi.map(|t| (i, t)))
                .collect()
        }
    })
}

fn layer_norm_backward(
    x: &Tensor,
    gamma: Option<&Tensor>,
    gamma_id: Option<usize>,
    beta_id: Option<usize>,
    eps: Scalar,
    x_id: usize,
    g: &Tensor,
) -> Vec<(usize, Tensor)> {
    let c = *x.shape().last().unwrap();
    let cf = c as Scalar;
    let mut gx = vec![0.0; x.numel()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gh = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    for ((row, gr), out) in x.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
        let (mean, rstd) = moments(row, eps);
        for k in 0..c {
            xhat[k] = (row[k] - mean) * rstd;
            ggamma[k] += gr[k] * xhat[k];
            gbeta[k] += gr[k];
            gh[k] = gr[k] * gamma.map_or(1.0, |gm| gm.data()[k]);
        }
        let sum_g: Scalar = gh.iter().sum();
        let sum_gx: Scalar = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        for k in 0..c {
            out[k] = rstd / cf * (cf * gh[k] - sum_g - xhat[k] * sum_gx);
        }
    }
    let mut res = vec![(x_id, Tensor::from_parts(x.shape().to_vec(), gx))];
    if let Some(id) = gamma_id {
        res.push((id, Tensor::from_parts(vec![c], ggamma)));
    }
    if let Some(id) = beta_id {
        res.push((id, Tensor::from_parts(vec![c], gbeta)));
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_dot() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(linear(x, w, Some(b)).unwrap().value().data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        assert_eq!(linear(x, w, Some(b)).unwrap().value().data(), &[6.0]);
    }

    #[test]
    fn linear_names_mismatched_axes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 5]));
        let err = linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("axis 1") && err.contains("axis 0"), "{err}");
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let xt = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let wt = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let bt = Tensor::randn(&[6], 1.0, &mut rng);
        let y = linear(tape.constant(xt.clone()), tape.constant(wt.clone()), Some(tape.constant(bt.clone()))).unwrap();
        let y = y.value();
        assert_eq!(y.shape(), &[3, 4, 6]);
        for i in 0..3 {
            for j in 0..4 {
                for o in 0..6 {
                    let mut acc = bt.at(&[o]);
                    for k in 0..5 {
                        acc += xt.at(&[i, j, k]) * wt.at(&[k, o]);
                    }
                    assert!((y.at(&[i, j, o]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batched_matmul_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4, 5], 1.0, &mut rng);
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let e: Scalar = (0..4).map(|k| a.at(&[n, i, k]) * b.at(&[n, k, j])).sum();
                    assert!((c.at(&[n, i, j]) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4], 3.0));
        let y = x.layer_norm(None, None, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = x.layer_norm(None, None, 1e-300).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::randn(&[5, 16], 3.0, &mut rng));
        let y = x.layer_norm(None, None, 1e-5).unwrap().value();
        for row in y.data().chunks(16) {
            let mean: Scalar = row.iter().sum::<Scalar>() / 16.0;
            let var: Scalar = row.iter().map(|v| (v - mean).powi(2)).sum::<Scalar>() / 16.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::full(&[4], 0.7)).softmax(0).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let y = tape.constant(t(&[2], &[1000.0, 0.0])).softmax(0).unwrap().value();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-300 && y.data()[1] < 1e-300);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 5, 2], 2.0, &mut rng);
        let y = tape.constant(x.clone()).softmax(1).unwrap().value();
        for i in 0..3 {
            for k in 0..2 {
                let z: Scalar = (0..5).map(|j| x.at(&[i, j, k]).exp()).sum();
                for j in 0..5 {
                    assert!((y.at(&[i, j, k]) - x.at(&[i, j, k]).exp() / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_basic_rules() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let g = tape.backward(x.add(x).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0, 2.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn elementwise_match_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[17], 2.0, &mut rng);
        let b = Tensor::randn(&[17], 2.0, &mut rng);
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let s = va.sigmoid().unwrap().value();
        let r = va.relu().unwrap().value();
        let ad = va.add(vb).unwrap().value();
        let m = va.mul(vb).unwrap().value();
        for i in 0..17 {
            let (x, y) = (a.data()[i], b.data()[i]);
            assert_eq!(s.data()[i], sigmoid(x));
            assert_eq!(r.data()[i], if x > 0.0 { x } else { 0.0 });
            assert_eq!(ad.data()[i], x + y);
            assert_eq!(m.data()[i], x * y);
        }
    }

    #[test]
    fn concat_narrow_index_select() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as Scalar));
        let b = tape.leaf(Tensor::from_fn(&[2, 1], |i| 10.0 + i as Scalar));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
        let n = c.narrow(1, 1, 2).unwrap();
        assert_eq!(n.value().data(), &[1.0, 10.0, 3.0, 11.0]);
        let s = c.index_select(&[1, 1, 0]).unwrap();
        assert_eq!(s.value().shape(), &[3, 3]);
        let g = tape.backward(s.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as Scalar));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        assert!(x.permute(&[0, 0, 1]).is_err());
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }
}
