//! Forward definitions of every differentiable operation.
//!
//! Broadcasting is deliberately narrow: element-wise binary operations need
//! identical shapes, and the only expansions are a scalar (`scale`,
//! `add_scalar`, `mul_scalar`) or a row vector along the last axis
//! (`add_row`, `mul_row`).

use crate::error::{invalid, Result, TensorError};
use crate::linalg::{gemm, Mat};
use crate::real::{lit, Real};
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max and log-sum-exp of a row.
#[inline]
pub(crate) fn row_lse<T: Real>(row: &[T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    (max, max + sum.ln())
}

impl<'t, T: Real> Var<'t, T> {
    fn same_shape_binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.tape.check(other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.value.shape() != b.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            }
            let data = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (Tensor::new(a.value.shape(), data)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, op(self.id, other.id), rg))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.value.map(f), n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape_binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape_binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape_binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    fn row_binary(self, row: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.tape.check(row)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, r) = (&nodes[self.id].value, &nodes[row.id].value);
            let width = *x.shape().last().unwrap_or(&0);
            if r.numel() != width || width == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: x.shape().to_vec(),
                    rhs: r.shape().to_vec(),
                });
            }
            let rd = r.data();
            let data = x
                .data()
                .chunks_exact(width)
                .flat_map(|chunk| chunk.iter().zip(rd).map(|(&a, &b)| f(a, b)))
                .collect();
            (
                Tensor::new(x.shape(), data)?,
                nodes[self.id].requires_grad || nodes[row.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Adds a vector to every row (last-axis expansion).
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::AddRow {
            x: self.id,
            row: row.id,
        };
        self.row_binary(row, "add_row", |a, b| a + b, op)
    }

    /// Multiplies every row element-wise by a vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::MulRow {
            x: self.id,
            row: row.id,
        };
        self.row_binary(row, "mul_row", |a, b| a * b, op)
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        self.unary(move |v| v * factor, Op::Scale { x: self.id, factor })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Adds a constant (masks, offsets); carries the gradient through unchanged.
    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |v| v + c, Op::AddConst { x: self.id })
    }

    /// Adds a constant tensor of identical shape (for example an attention mask).
    pub fn add_const(self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            if x.value.shape() != c.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_const",
                    lhs: x.value.shape().to_vec(),
                    rhs: c.shape().to_vec(),
                });
            }
            let data = x.value.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
            (Tensor::new(x.value.shape(), data)?, x.requires_grad)
        };
        Ok(self.tape.push(value, Op::AddConst { x: self.id }, rg))
    }

    /// Multiplies by a one-element variable (for example a learnable scale).
    pub fn mul_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check(s)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let sv = &nodes[s.id].value;
            if sv.numel() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_scalar",
                    lhs: nodes[self.id].value.shape().to_vec(),
                    rhs: sv.shape().to_vec(),
                });
            }
            let k = sv.data()[0];
            (
                nodes[self.id].value.map(|v| v * k),
                nodes[self.id].requires_grad || nodes[s.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::MulScalar { x: self.id, s: s.id }, rg))
    }

    fn matmul_impl(self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.tape.check(other)?;
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let mismatch = || TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            let ((m, k), (br, bc)) = match (a.dims2(), b.dims2()) {
                (Ok(x), Ok(y)) => (x, y),
                _ => return Err(mismatch()),
            };
            let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(mismatch());
            }
            let mut out = vec![T::zero(); m * n];
            gemm(
                Mat::new(a.data(), m, k, false),
                Mat::new(b.data(), br, bc, trans_b),
                &mut out,
                T::zero(),
            );
            (
                Tensor::new([m, n], out)?,
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        let op = Op::Matmul {
            a: self.id,
            b: other.id,
            trans_b,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Matrix product `self[m,k] · other[k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// Matrix product with the transpose of `other`: `self[m,k] · other[n,k]ᵀ`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let (r, c) = x.dims2()?;
            let d = x.data();
            let mut out = Vec::with_capacity(r * c);
            for j in 0..c {
                out.extend((0..r).map(|i| d[i * c + j]));
            }
            (Tensor::new([c, r], out)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.value.clone().reshape(shape)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let (value, rg, dims) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if axis >= x.ndim() {
                return Err(invalid("softmax", format!("axis {axis} for shape {:?}", x.shape())));
            }
            if x.data().iter().any(|v| v.is_nan()) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let d = x.data();
            let mut out = vec![T::zero(); d.len()];
            if inner == 1 {
                for (src, dst) in d.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = (v - max).exp();
                        sum = sum + *o;
                    }
                    let inv = T::one() / sum;
                    dst.iter_mut().for_each(|o| *o = *o * inv);
                }
            } else {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let max = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for k in 0..len {
                            let e = (d[at(k)] - max).exp();
                            out[at(k)] = e;
                            sum = sum + e;
                        }
                        for k in 0..len {
                            out[at(k)] = out[at(k)] / sum;
                        }
                    }
                }
            }
            (
                Tensor::new(x.shape(), out)?,
                nodes[self.id].requires_grad,
                (outer, len, inner),
            )
        };
        let (outer, len, inner) = dims;
        let op = Op::Softmax {
            x: self.id,
            outer,
            len,
            inner,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Layer normalization over the last axis followed by `gain * x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.tape.check(gain)?;
        self.tape.check(bias)?;
        let (value, rg, xhat, rstd) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let width = *x.shape().last().unwrap_or(&0);
            if width < 2 {
                return Err(invalid(
                    "layer_norm",
                    format!("last axis of {:?} must be >= 2", x.shape()),
                ));
            }
            let (g, b) = (&nodes[gain.id].value, &nodes[bias.id].value);
            if g.numel() != width || b.numel() != width {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = x.numel() / width;
            let inv_w = T::one() / lit::<T>(width as f64);
            let mut xhat = vec![T::zero(); x.numel()];
            let mut out = vec![T::zero(); x.numel()];
            let mut rstd = Vec::with_capacity(rows);
            for ((src, xh), dst) in x
                .data()
                .chunks_exact(width)
                .zip(xhat.chunks_exact_mut(width))
                .zip(out.chunks_exact_mut(width))
            {
                let mean = src.iter().copied().sum::<T>() * inv_w;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for j in 0..width {
                    let h = (src[j] - mean) * r;
                    xh[j] = h;
                    dst[j] = h * g.data()[j] + b.data()[j];
                }
            }
            let rg = nodes[self.id].requires_grad || nodes[gain.id].requires_grad || nodes[bias.id].requires_grad;
            (Tensor::new(x.shape(), out)?, rg, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu_fwd, Op::Gelu(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|v| v.exp(), Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(|v| v.ln(), Op::Log(self.id))
    }

    fn reduce_all(self, mean: bool) -> Var<'t, T> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut s: T = x.data().iter().copied().sum();
            if mean {
                s = s / lit(x.numel() as f64);
            }
            (Tensor::scalar(s), nodes[self.id].requires_grad)
        };
        let op = if mean { Op::Mean(self.id) } else { Op::Sum(self.id) };
        self.tape.push(value, op, rg)
    }

    pub fn sum(self) -> Var<'t, T> {
        self.reduce_all(false)
    }

    pub fn mean(self) -> Var<'t, T> {
        self.reduce_all(true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let (value, rg, dims, factor) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if axis >= x.ndim() {
                return Err(invalid("sum_axis", format!("axis {axis} for shape {:?}", x.shape())));
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let factor = if mean { T::one() / lit(len as f64) } else { T::one() };
            let d = x.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst = *dst + v;
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v = *v * factor);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            (
                Tensor::new(shape, out)?,
                nodes[self.id].requires_grad,
                (outer, len, inner),
                factor,
            )
        };
        let (outer, len, inner) = dims;
        let op = Op::SumAxis {
            x: self.id,
            outer,
            len,
            inner,
            factor,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = *parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        for p in parts {
            tape.check(*p)?;
        }
        let (value, rg, outer, inner, lens) = {
            let nodes = tape.nodes();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(invalid("concat", format!("axis {axis} for shape {base:?}")));
            }
            let mut lens = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base,
                        rhs: s.to_vec(),
                    });
                }
                lens.push(s[axis]);
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let total: usize = lens.iter().sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (p, &len) in parts.iter().zip(&lens) {
                    let d = nodes[p.id].value.data();
                    out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (Tensor::new(shape, out)?, rg, outer, inner, lens)
        };
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            outer,
            inner,
            lens,
        };
        Ok(tape.push(value, op, rg))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (value, rg, outer, inner, full) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if axis >= x.ndim() || start + len > x.shape()[axis] || len == 0 {
                return Err(invalid(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
                ));
            }
            let (outer, full, inner) = split_axis(x.shape(), axis);
            let d = x.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            (
                Tensor::new(shape, out)?,
                nodes[self.id].requires_grad,
                outer,
                inner,
                full,
            )
        };
        let op = Op::Slice {
            x: self.id,
            outer,
            inner,
            full,
            start,
            len,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Gathers rows (first-axis slices) by index; used for embedding lookup.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let rows = *x.shape().first().unwrap_or(&0);
            let width = if rows == 0 { 0 } else { x.numel() / rows };
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(invalid(
                    "gather_rows",
                    format!("row {bad} out of range for {rows} rows"),
                ));
            }
            let mut out = Vec::with_capacity(ids.len() * width);
            for &i in ids {
                out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = ids.len();
            (Tensor::new(shape, out)?, nodes[self.id].requires_grad)
        };
        let op = Op::GatherRows {
            table: self.id,
            ids: ids.to_vec(),
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Scales each last-axis vector to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'t, T>> {
        let (value, rg, inv_norms) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let width = *x.shape().last().unwrap_or(&0);
            if width == 0 {
                return Err(invalid("l2_normalize", "empty last axis"));
            }
            let floor: T = lit(1e-12);
            let mut out = Vec::with_capacity(x.numel());
            let mut inv_norms = Vec::with_capacity(x.numel() / width);
            for row in x.data().chunks_exact(width) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                let inv = T::one() / n;
                inv_norms.push(inv);
                out.extend(row.iter().map(|&v| v * inv));
            }
            (Tensor::new(x.shape(), out)?, nodes[self.id].requires_grad, inv_norms)
        };
        let op = Op::L2Normalize { x: self.id, inv_norms };
        Ok(self.tape.push(value, op, rg))
    }

    /// Cosine similarity between every row of `self` and every row of `other`.
    pub fn cosine_similarity(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.l2_normalize()?.matmul_t(other.l2_normalize()?)
    }

    /// Mean cross-entropy of row-wise softmax over `logits[N, M]` against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let (value, rg, probs) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let (n, m) = x.dims2()?;
            if targets.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
                return Err(invalid("cross_entropy", format!("target {bad} >= {m} classes")));
            }
            if !x.all_finite() {
                return Err(TensorError::NonFinite { op: "cross_entropy" });
            }
            let mut probs = Vec::with_capacity(n * m);
            let mut total = T::zero();
            for (row, &t) in x.data().chunks_exact(m).zip(targets) {
                let (_, lse) = row_lse(row);
                total = total + (lse - row[t]);
                probs.extend(row.iter().map(|&v| (v - lse).exp()));
            }
            let loss = total / lit(n as f64);
            (Tensor::scalar(loss), nodes[self.id].requires_grad, probs)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Mean over rows of `-Σ_j t_ij log softmax(logits)_ij` for soft targets `t`.
    pub fn soft_cross_entropy(self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        let (value, rg, probs) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let (n, m) = x.dims2()?;
            if targets.shape() != x.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "soft_cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: targets.shape().to_vec(),
                });
            }
            if !x.all_finite() {
                return Err(TensorError::NonFinite {
                    op: "soft_cross_entropy",
                });
            }
            let mut probs = Vec::with_capacity(n * m);
            let mut total = T::zero();
            for (row, trow) in x.data().chunks_exact(m).zip(targets.data().chunks_exact(m)) {
                let (_, lse) = row_lse(row);
                let mut acc = T::zero();
                for (&v, &t) in row.iter().zip(trow) {
                    if t != T::zero() {
                        acc = acc + t * (lse - v);
                    }
                }
                total = total + acc;
                probs.extend(row.iter().map(|&v| (v - lse).exp()));
            }
            let loss = total / lit(n as f64);
            (Tensor::scalar(loss), nodes[self.id].requires_grad, probs)
        };
        let op = Op::SoftCrossEntropy {
            logits: self.id,
            targets: targets.data().to_vec(),
            probs,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against targets in `[0, 1]`.
    pub fn bce_with_logits(self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if targets.shape() != x.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "bce_with_logits",
                    lhs: x.shape().to_vec(),
                    rhs: targets.shape().to_vec(),
                });
            }
            let total: T = x.data().iter().zip(targets.data()).map(|(&z, &t)| bce_term(z, t)).sum();
            (Tensor::scalar(total), nodes[self.id].requires_grad)
        };
        let op = Op::BceWithLogits {
            logits: self.id,
            targets: targets.data().to_vec(),
        };
        Ok(self.tape.push(value, op, rg))
    }
}

/// `-[t log σ(z) + (1-t) log(1-σ(z))]` in overflow-free form.
#[inline]
pub(crate) fn bce_term<T: Real>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_fwd<T: Real>(x: T) -> T {
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + lit::<T>(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * dinner
}
