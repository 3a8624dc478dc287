use crate::linalg::{gemm, Mat};
use crate::ops::gelu_grad;
use crate::real::{lit, Real};
use crate::tape::{Node, Op};
use crate::tensor::Tensor;

/// Gradient buffers, allocated lazily as contributions arrive.
struct Grads<'a, T> {
    nodes: &'a [Node<T>],
    bufs: Vec<Option<Vec<T>>>,
}

impl<'a, T: Real> Grads<'a, T> {
    /// Buffer for node `id` when it needs a gradient.
    fn slot(&mut self, id: usize) -> Option<&mut [T]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(self.bufs[id].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn add(&mut self, id: usize, g: &[T]) {
        if let Some(s) = self.slot(id) {
            s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
        }
    }

    fn add_map(&mut self, id: usize, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(s) = self.slot(id) {
            for (i, (a, &b)) in s.iter_mut().zip(g).enumerate() {
                *a = *a + f(i, b);
            }
        }
    }
}

pub(crate) fn run_backward<T: Real>(nodes: &[Node<T>], loss: usize) -> Vec<Option<Tensor<T>>> {
    let mut grads = Grads {
        nodes,
        bufs: vec![None; nodes.len()],
    };
    if nodes[loss].requires_grad {
        grads.bufs[loss] = Some(vec![T::one()]);
    }
    for id in (0..=loss).rev() {
        let Some(g) = grads.bufs[id].take() else {
            continue;
        };
        propagate(&mut grads, id, &g);
        grads.bufs[id] = Some(g);
    }
    grads
        .bufs
        .into_iter()
        .zip(nodes)
        .map(|(b, n)| b.map(|data| Tensor::new(n.value.shape(), data).expect("gradient matches node shape")))
        .collect()
}

fn propagate<T: Real>(grads: &mut Grads<'_, T>, id: usize, g: &[T]) {
    let nodes = grads.nodes;
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            grads.add(*a, g);
            grads.add(*b, g);
        }
        Op::Sub(a, b) => {
            grads.add(*a, g);
            grads.add_map(*b, g, |_, v| -v);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            grads.add_map(*a, g, |i, v| v * bv[i]);
            grads.add_map(*b, g, |i, v| v * av[i]);
        }
        Op::AddRow { x, row } => {
            grads.add(*x, g);
            let w = val(*row).numel();
            if let Some(s) = grads.slot(*row) {
                for chunk in g.chunks_exact(w) {
                    s.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::MulRow { x, row } => {
            let (xv, rv) = (val(*x).data(), val(*row).data());
            let w = rv.len();
            grads.add_map(*x, g, |i, v| v * rv[i % w]);
            if let Some(s) = grads.slot(*row) {
                for (gc, xc) in g.chunks_exact(w).zip(xv.chunks_exact(w)) {
                    for j in 0..w {
                        s[j] = s[j] + gc[j] * xc[j];
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            let f = *factor;
            grads.add_map(*x, g, |_, v| v * f);
        }
        Op::AddConst { x } | Op::Reshape(x) => grads.add(*x, g),
        Op::MulScalar { x, s } => {
            let k = val(*s).data()[0];
            grads.add_map(*x, g, |_, v| v * k);
            let xv = val(*x).data();
            if let Some(sg) = grads.slot(*s) {
                let dot: T = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                sg[0] = sg[0] + dot;
            }
        }
        Op::Matmul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let (br, bc) = (bv.shape()[0], bv.shape()[1]);
            let n = node.value.shape()[1];
            let gm = Mat::new(g, m, n, false);
            if let Some(ga) = grads.slot(*a) {
                // dA = dC · op(B)ᵀ
                gemm(gm, Mat::new(bv.data(), br, bc, !*trans_b), ga, T::one());
            }
            if let Some(gb) = grads.slot(*b) {
                if *trans_b {
                    // C = A·Bᵀ, dB = dCᵀ · A
                    gemm(Mat::new(g, m, n, true), Mat::new(av.data(), m, k, false), gb, T::one());
                } else {
                    // dB = Aᵀ · dC
                    gemm(Mat::new(av.data(), m, k, true), gm, gb, T::one());
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            // node is [r, c] = xᵀ, x is [c, r]
            if let Some(s) = grads.slot(*x) {
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] = s[j * r + i] + g[i * c + j];
                    }
                }
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = node.value.data();
            let (outer, len, inner) = (*outer, *len, *inner);
            if let Some(s) = grads.slot(*x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            let p = at(k);
                            s[p] = s[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain).data();
            let w = gv.len();
            let inv_w = T::one() / lit::<T>(w as f64);
            if let Some(s) = grads.slot(*x) {
                for (r, ((gc, xh), sc)) in g
                    .chunks_exact(w)
                    .zip(xhat.chunks_exact(w))
                    .zip(s.chunks_exact_mut(w))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..w {
                        let d = gc[j] * gv[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xh[j];
                    }
                    mean_d = mean_d * inv_w;
                    mean_dx = mean_dx * inv_w;
                    for j in 0..w {
                        let d = gc[j] * gv[j];
                        sc[j] = sc[j] + rstd[r] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
            }
            if let Some(s) = grads.slot(*gain) {
                for (gc, xh) in g.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                    for j in 0..w {
                        s[j] = s[j] + gc[j] * xh[j];
                    }
                }
            }
            if let Some(s) = grads.slot(*bias) {
                for gc in g.chunks_exact(w) {
                    s.iter_mut().zip(gc).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            grads.add_map(*x, g, |i, v| v * gelu_grad(xv[i]));
        }
        Op::Exp(x) => {
            let y = node.value.data();
            grads.add_map(*x, g, |i, v| v * y[i]);
        }
        Op::Log(x) => {
            let xv = val(*x).data();
            grads.add_map(*x, g, |i, v| v / xv[i]);
        }
        Op::Sum(x) => {
            if let Some(s) = grads.slot(*x) {
                s.iter_mut().for_each(|a| *a = *a + g[0]);
            }
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            let g0 = g[0] / lit(n as f64);
            if let Some(s) = grads.slot(*x) {
                s.iter_mut().for_each(|a| *a = *a + g0);
            }
        }
        Op::SumAxis {
            x,
            outer,
            len,
            inner,
            factor,
        } => {
            let (outer, len, inner, f) = (*outer, *len, *inner, *factor);
            if let Some(s) = grads.slot(*x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let dst = &mut s[(o * len + k) * inner..(o * len + k + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b * f);
                    }
                }
            }
        }
        Op::Concat {
            inputs,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&input, &len) in inputs.iter().zip(lens) {
                if let Some(s) = grads.slot(input) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                offset += len;
            }
        }
        Op::Slice {
            x,
            outer,
            inner,
            full,
            start,
            len,
        } => {
            let (inner, full, start, len) = (*inner, *full, *start, *len);
            if let Some(s) = grads.slot(*x) {
                for o in 0..*outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = (o * full + start) * inner;
                    let dst = &mut s[base..base + len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let rows = val(*table).shape()[0];
            let w = val(*table).numel() / rows.max(1);
            if let Some(s) = grads.slot(*table) {
                for (k, &i) in ids.iter().enumerate() {
                    let src = &g[k * w..(k + 1) * w];
                    let dst = &mut s[i * w..(i + 1) * w];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::L2Normalize { x, inv_norms } => {
            let y = node.value.data();
            let w = y.len() / inv_norms.len().max(1);
            if let Some(s) = grads.slot(*x) {
                for (r, ((gc, yc), sc)) in g
                    .chunks_exact(w)
                    .zip(y.chunks_exact(w))
                    .zip(s.chunks_exact_mut(w))
                    .enumerate()
                {
                    let dot: T = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        sc[j] = sc[j] + (gc[j] - yc[j] * dot) * inv_norms[r];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = targets.len();
            let m = probs.len() / n.max(1);
            let scale = g[0] / lit(n as f64);
            if let Some(s) = grads.slot(*logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..m {
                        let mut d = probs[r * m + j];
                        if j == t {
                            d = d - T::one();
                        }
                        s[r * m + j] = s[r * m + j] + d * scale;
                    }
                }
            }
        }
        Op::SoftCrossEntropy { logits, targets, probs } => {
            let shape = val(*logits).shape();
            let (n, m) = (shape[0], shape[1]);
            let scale = g[0] / lit(n as f64);
            if let Some(s) = grads.slot(*logits) {
                for r in 0..n {
                    let trow = &targets[r * m..(r + 1) * m];
                    let mass: T = trow.iter().copied().sum();
                    for j in 0..m {
                        let p = r * m + j;
                        s[p] = s[p] + (probs[p] * mass - trow[j]) * scale;
                    }
                }
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let z = val(*logits).data();
            let g0 = g[0];
            if let Some(s) = grads.slot(*logits) {
                for i in 0..z.len() {
                    let sig = T::one() / (T::one() + (-z[i]).exp());
                    s[i] = s[i] + (sig - targets[i]) * g0;
                }
            }
        }
    }
}
