//! Differentiable operations: forward constructors on [`Var`] and the matching
//! backward rules.

use std::rc::Rc;

use crate::ctc;
use crate::graph::{Graph, Node, Var};
use crate::kernels::{self, ConvGeom, DepthwiseGeom, ROW_MAJOR, TRANSPOSED};
use crate::par;
use crate::tensor::{broadcast_shape, numel, split_axis, Tensor};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Silu(usize),
    Tanh(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, axis: usize, indices: Rc<Vec<usize>> },
    SumAxis(usize),
    SumAll(usize),
    BroadcastTo(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Conv { x: usize, w: usize, geom: ConvGeom },
    Depthwise { x: usize, w: usize, geom: DepthwiseGeom },
    RelPosBias { table: usize, len: usize, max_dist: usize },
    Ctc { x: usize, grad: Tensor },
}

fn val(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

impl Op {
    pub(crate) fn backward(&self, nodes: &[Node], out: &Tensor, g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.reduce_to(val(nodes, *a).shape()));
                emit(*b, g.reduce_to(val(nodes, *b).shape()));
            }
            Op::Sub(a, b) => {
                emit(*a, g.reduce_to(val(nodes, *a).shape()));
                emit(*b, g.map(|x| -x).reduce_to(val(nodes, *b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(nodes, *a), val(nodes, *b));
                if nodes[*a].requires_grad {
                    emit(*a, g.zip_map(vb, |x, y| x * y).reduce_to(va.shape()));
                }
                if nodes[*b].requires_grad {
                    emit(*b, g.zip_map(va, |x, y| x * y).reduce_to(vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(nodes, *a), val(nodes, *b));
                if nodes[*a].requires_grad {
                    emit(*a, g.zip_map(vb, |x, y| x / y).reduce_to(va.shape()));
                }
                if nodes[*b].requires_grad {
                    // d(a/b)/db = -out/b
                    let t = g.zip_map(out, |x, o| -x * o);
                    emit(*b, t.zip_map(vb, |x, y| x / y).reduce_to(vb.shape()));
                }
            }
            Op::AddScalar(a) => emit(*a, g.clone()),
            Op::Scale(a, c) => emit(*a, g.map(|x| x * c)),
            Op::Neg(a) => emit(*a, g.map(|x| -x)),
            Op::Exp(a) => emit(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => emit(*a, g.zip_map(val(nodes, *a), |x, v| x / v)),
            Op::Sqrt(a) => emit(*a, g.zip_map(out, |x, y| 0.5 * x / y)),
            Op::Square(a) => emit(*a, g.zip_map(val(nodes, *a), |x, v| 2.0 * x * v)),
            Op::Relu(a) => emit(*a, g.zip_map(val(nodes, *a), |x, v| if v > 0.0 { x } else { 0.0 })),
            Op::LeakyRelu(a, s) => {
                emit(*a, g.zip_map(val(nodes, *a), |x, v| if v > 0.0 { x } else { x * s }))
            }
            Op::Sigmoid(a) => emit(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Silu(a) => emit(
                *a,
                g.zip_map(val(nodes, *a), |x, v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    x * s * (1.0 + v * (1.0 - s))
                }),
            ),
            Op::Tanh(a) => emit(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::MatMul(a, b) => matmul_backward(nodes, *a, *b, g, emit),
            Op::Reshape(a) => emit(*a, g.clone().reshape(val(nodes, *a).shape())),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                emit(*a, g.permute(&inv));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(nodes, p).dim(*axis);
                    if nodes[p].requires_grad {
                        emit(p, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = val(nodes, *x).shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let len = g.dim(*axis);
                let mut d = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                emit(*x, Tensor::new(shape, d));
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = val(nodes, *x).shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let mut d = vec![0.0; numel(shape)];
                let gd = g.data();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * dim + i) * inner;
                        for k in 0..inner {
                            d[dst + k] += gd[src + k];
                        }
                    }
                }
                emit(*x, Tensor::new(shape, d));
            }
            Op::SumAxis(a) => {
                let shape = val(nodes, *a).shape();
                emit(*a, Tensor::zeros(shape).zip_map(g, |_, y| y));
            }
            Op::SumAll(a) => emit(*a, Tensor::full(val(nodes, *a).shape(), g.item())),
            Op::BroadcastTo(a) => emit(*a, g.reduce_to(val(nodes, *a).shape())),
            Op::Softmax(a) => {
                let n = out.shape().last().copied().unwrap_or(1);
                let mut d = vec![0.0; out.numel()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                emit(*a, Tensor::new(out.shape(), d));
            }
            Op::LogSoftmax(a) => {
                let n = out.shape().last().copied().unwrap_or(1);
                let mut d = vec![0.0; out.numel()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..n {
                        dr[i] = gr[i] - yr[i].exp() * s;
                    }
                }
                emit(*a, Tensor::new(out.shape(), d));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.shape().last().copied().unwrap_or(1);
                let mut d = vec![0.0; out.numel()];
                for (r, ((dr, yr), gr)) in
                    d.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)).enumerate()
                {
                    let mg: f64 = gr.iter().sum::<f64>() / n as f64;
                    let mgy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for i in 0..n {
                        dr[i] = inv_std[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
                emit(*x, Tensor::new(out.shape(), d));
            }
            Op::Conv { x, w, geom } => {
                let (vx, vw) = (val(nodes, *x), val(nodes, *w));
                let (dx, dw) = geom.backward(
                    vx.data(),
                    vw.data(),
                    g.data(),
                    nodes[*x].requires_grad,
                    nodes[*w].requires_grad,
                );
                if let Some(dx) = dx {
                    emit(*x, Tensor::new(vx.shape(), dx));
                }
                if let Some(dw) = dw {
                    emit(*w, Tensor::new(vw.shape(), dw));
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (vx, vw) = (val(nodes, *x), val(nodes, *w));
                let (dx, dw) = geom.backward(vx.data(), vw.data(), g.data());
                emit(*x, Tensor::new(vx.shape(), dx));
                emit(*w, Tensor::new(vw.shape(), dw));
            }
            Op::RelPosBias { table, len, max_dist } => {
                let shape = val(nodes, *table).shape();
                let (heads, width) = (shape[0], shape[1]);
                let mut d = vec![0.0; heads * width];
                let gd = g.data();
                for h in 0..heads {
                    for i in 0..*len {
                        for j in 0..*len {
                            let r = rel_index(i, j, *max_dist);
                            d[h * width + r] += gd[(h * len + i) * len + j];
                        }
                    }
                }
                emit(*table, Tensor::new(shape, d));
            }
            Op::Ctc { x, grad } => {
                // grad: (B, T, V); g: (B,)
                let b = grad.dim(0);
                let per = grad.numel() / b.max(1);
                let mut d = grad.clone();
                for (i, chunk) in d.data_mut().chunks_mut(per).enumerate() {
                    let s = g.data()[i];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                emit(*x, d);
            }
        }
    }
}

fn rel_index(i: usize, j: usize, max_dist: usize) -> usize {
    let r = (j as isize - i as isize).clamp(-(max_dist as isize), max_dist as isize);
    (r + max_dist as isize) as usize
}

fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize, bool) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2, got {a:?} x {b:?}");
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    assert_eq!(k, kb, "matmul inner dims differ: {a:?} x {b:?}");
    if b.len() == 2 {
        (numel(&a[..a.len() - 2]), m, k, n, true)
    } else {
        assert_eq!(a[..a.len() - 2], b[..b.len() - 2], "matmul batch dims differ: {a:?} x {b:?}");
        (numel(&a[..a.len() - 2]), m, k, n, false)
    }
}

fn matmul_backward(nodes: &[Node], a: usize, b: usize, g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)) {
    let (va, vb) = (val(nodes, a), val(nodes, b));
    let (batch, m, k, n, shared) = matmul_dims(va.shape(), vb.shape());
    if nodes[a].requires_grad {
        let mut da = vec![0.0; va.numel()];
        if shared {
            kernels::gemm(batch * m, n, k, g.data(), ROW_MAJOR(n), vb.data(), TRANSPOSED(n), &mut da, false);
        } else {
            par::for_each_chunk_mut(&mut da, m * k, |i, chunk| {
                kernels::gemm(
                    m,
                    n,
                    k,
                    &g.data()[i * m * n..(i + 1) * m * n],
                    ROW_MAJOR(n),
                    &vb.data()[i * k * n..(i + 1) * k * n],
                    TRANSPOSED(n),
                    chunk,
                    false,
                );
            });
        }
        emit(a, Tensor::new(va.shape(), da));
    }
    if nodes[b].requires_grad {
        let mut db = vec![0.0; vb.numel()];
        if shared {
            kernels::gemm(k, batch * m, n, va.data(), TRANSPOSED(k), g.data(), ROW_MAJOR(n), &mut db, false);
        } else {
            par::for_each_chunk_mut(&mut db, k * n, |i, chunk| {
                kernels::gemm(
                    k,
                    m,
                    n,
                    &va.data()[i * m * k..(i + 1) * m * k],
                    TRANSPOSED(k),
                    &g.data()[i * m * n..(i + 1) * m * n],
                    ROW_MAJOR(n),
                    chunk,
                    false,
                );
            });
        }
        emit(b, Tensor::new(vb.shape(), db));
    }
}

impl<'g> Var<'g> {
    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let v = self.value().zip_map(&other.value(), f);
        self.graph.push(v, op, self.requires_grad() || other.requires_grad())
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(self.value().map(|x| -x), Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'g> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(self.value().map(|x| x * x), Op::Square(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.unary(
            self.value().map(|x| if x > 0.0 { x } else { slope * x }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(self.value().map(|x| 1.0 / (1.0 + (-x).exp())), Op::Sigmoid(self.id))
    }

    pub fn silu(&self) -> Var<'g> {
        self.unary(self.value().map(|x| x / (1.0 + (-x).exp())), Op::Silu(self.id))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    /// `(..., M, K) x (K, N)` or batched `(..., M, K) x (..., K, N)`.
    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        let (va, vb) = (self.value(), other.value());
        let (batch, m, k, n, shared) = matmul_dims(va.shape(), vb.shape());
        let mut out_shape = va.shape()[..va.ndim() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut c = vec![0.0; batch * m * n];
        if shared {
            kernels::gemm(batch * m, k, n, va.data(), ROW_MAJOR(k), vb.data(), ROW_MAJOR(n), &mut c, false);
        } else {
            let (ad, bd) = (va.data(), vb.data());
            par::for_each_chunk_mut(&mut c, m * n, |i, chunk| {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ROW_MAJOR(k),
                    &bd[i * k * n..(i + 1) * k * n],
                    ROW_MAJOR(n),
                    chunk,
                    false,
                );
            });
        }
        self.graph.push(
            Tensor::new(&out_shape, c),
            Op::MatMul(self.id, other.id),
            self.requires_grad() || other.requires_grad(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let v = self.value().permute(axes);
        self.unary(v, Op::Permute(self.id, axes.to_vec()))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value().narrow(axis, start, len);
        self.unary(v, Op::Narrow { x: self.id, axis, start })
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Var<'g> {
        let v = self.value().index_select(axis, indices);
        self.unary(v, Op::IndexSelect { x: self.id, axis, indices: Rc::new(indices.to_vec()) })
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Var<'g> {
        let v = self.value();
        let (outer, dim, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v.data()[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        self.unary(Tensor::new(&shape, out), Op::SumAxis(self.id))
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'g> {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Mean over `axis` that is bit-identical under any permutation of the
    /// elements along it: each lane is summed in ascending value order.
    pub fn pool_mean_axis(&self, axis: usize) -> Var<'g> {
        let v = self.value();
        let (outer, dim, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut lane = vec![0.0; dim];
        for o in 0..outer {
            for i in 0..inner {
                for (d, x) in lane.iter_mut().enumerate() {
                    *x = v.data()[(o * dim + d) * inner + i];
                }
                lane.sort_by(f64::total_cmp);
                out[o * inner + i] = lane.iter().sum();
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        self.unary(Tensor::new(&shape, out), Op::SumAxis(self.id)).scale(1.0 / dim as f64)
    }

    pub fn sum_all(&self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        assert_eq!(broadcast_shape(v.shape(), shape), shape, "cannot broadcast {:?} to {shape:?}", v.shape());
        let out = Tensor::zeros(shape).zip_map(&v, |_, y| y);
        self.unary(out, Op::BroadcastTo(self.id))
    }

    pub fn softmax(&self) -> Var<'g> {
        let v = self.value();
        let n = v.shape().last().copied().unwrap_or(1);
        let mut d = v.data().to_vec();
        for row in d.chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.unary(Tensor::new(v.shape(), d), Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Var<'g> {
        let v = self.value();
        let n = v.shape().last().copied().unwrap_or(1);
        let mut d = v.data().to_vec();
        for row in d.chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.unary(Tensor::new(v.shape(), d), Op::LogSoftmax(self.id))
    }

    /// Normalizes the last axis to zero mean, unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Var<'g> {
        let v = self.value();
        let n = v.shape().last().copied().unwrap_or(1);
        let mut d = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(d.len() / n.max(1));
        for row in d.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        self.unary(Tensor::new(v.shape(), d), Op::LayerNorm { x: self.id, inv_std })
    }
}

pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!parts.is_empty(), "concat of nothing");
    let g = parts[0].graph;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat(&refs, axis);
    let rg = parts.iter().any(|p| p.requires_grad());
    g.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg)
}

/// 1-D convolution over time: `x (B, T, Cin)`, `w (K, Cin, Cout)`, stride 1,
/// symmetric zero padding `pad`.
pub fn conv1d<'g>(x: Var<'g>, w: Var<'g>, pad: usize) -> Var<'g> {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.len(), 3, "conv1d input must be (B, T, C), got {xs:?}");
    assert_eq!(ws.len(), 3, "conv1d weight must be (K, Cin, Cout), got {ws:?}");
    assert_eq!(xs[2], ws[1], "conv1d channel mismatch {xs:?} vs {ws:?}");
    let geom = ConvGeom {
        batch: xs[0],
        h: xs[1],
        w: 1,
        cin: xs[2],
        kh: ws[0],
        kw: 1,
        cout: ws[2],
        sh: 1,
        sw: 1,
        ph: pad,
        pw: 0,
    };
    assert!(xs[1] + 2 * pad >= ws[0], "conv1d kernel longer than padded input");
    let y = geom.forward(x.value().data(), w.value().data());
    let shape = [xs[0], geom.out_h(), ws[2]];
    x.graph.push(Tensor::new(&shape, y), Op::Conv { x: x.id, w: w.id, geom }, x.requires_grad() || w.requires_grad())
}

/// 2-D NHWC convolution: `x (B, H, W, Cin)`, `w (KH, KW, Cin, Cout)`.
pub fn conv2d<'g>(x: Var<'g>, w: Var<'g>, stride: (usize, usize), pad: (usize, usize)) -> Var<'g> {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.len(), 4, "conv2d input must be (B, H, W, C), got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be (KH, KW, Cin, Cout), got {ws:?}");
    assert_eq!(xs[3], ws[2], "conv2d channel mismatch {xs:?} vs {ws:?}");
    assert!(xs[1] + 2 * pad.0 >= ws[0] && xs[2] + 2 * pad.1 >= ws[1], "conv2d kernel larger than input");
    let geom = ConvGeom {
        batch: xs[0],
        h: xs[1],
        w: xs[2],
        cin: xs[3],
        kh: ws[0],
        kw: ws[1],
        cout: ws[3],
        sh: stride.0,
        sw: stride.1,
        ph: pad.0,
        pw: pad.1,
    };
    let y = geom.forward(x.value().data(), w.value().data());
    let shape = [xs[0], geom.out_h(), geom.out_w(), ws[3]];
    x.graph.push(Tensor::new(&shape, y), Op::Conv { x: x.id, w: w.id, geom }, x.requires_grad() || w.requires_grad())
}

/// Depthwise 1-D convolution: `x (B, T, C)`, `w (K, C)`.
pub fn depthwise_conv1d<'g>(x: Var<'g>, w: Var<'g>, pad: usize) -> Var<'g> {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.len(), 3, "depthwise input must be (B, T, C)");
    assert_eq!(ws.len(), 2, "depthwise weight must be (K, C)");
    assert_eq!(xs[2], ws[1], "depthwise channel mismatch");
    let geom = DepthwiseGeom { batch: xs[0], t: xs[1], c: xs[2], k: ws[0], pad };
    let y = geom.forward(x.value().data(), w.value().data());
    let shape = [xs[0], geom.out_t(), xs[2]];
    x.graph.push(
        Tensor::new(&shape, y),
        Op::Depthwise { x: x.id, w: w.id, geom },
        x.requires_grad() || w.requires_grad(),
    )
}

/// Learned relative-position attention bias.
///
/// `table` is `(H, 2R+1)`; output `(H, len, len)` with entry `[h, i, j]` read
/// from offset `clamp(j - i, -R, R)`.
pub fn rel_pos_bias(table: Var<'_>, len: usize) -> Var<'_> {
    let ts = table.shape();
    assert_eq!(ts.len(), 2, "relative bias table must be (H, 2R+1)");
    assert!(ts[1] % 2 == 1, "relative bias width must be odd");
    let (heads, width) = (ts[0], ts[1]);
    let max_dist = width / 2;
    let tv = table.value();
    let mut out = vec![0.0; heads * len * len];
    for h in 0..heads {
        for i in 0..len {
            for j in 0..len {
                out[(h * len + i) * len + j] = tv.data()[h * width + rel_index(i, j, max_dist)];
            }
        }
    }
    table.graph.push(
        Tensor::new(&[heads, len, len], out),
        Op::RelPosBias { table: table.id, len, max_dist },
        table.requires_grad(),
    )
}

/// Per-item CTC negative log-likelihood.
///
/// `log_probs` is `(B, T, V)` (log-softmax outputs); item `b` uses its first
/// `input_lengths[b]` frames. Returns a `(B,)` var.
pub fn ctc_nll<'g>(log_probs: Var<'g>, targets: &[Vec<usize>], input_lengths: &[usize], blank: usize) -> Var<'g> {
    let s = log_probs.shape();
    assert_eq!(s.len(), 3, "ctc input must be (B, T, V)");
    let (b, t, v) = (s[0], s[1], s[2]);
    assert_eq!(targets.len(), b, "one target per batch item");
    assert_eq!(input_lengths.len(), b, "one input length per batch item");
    let lp = log_probs.value();
    let lpd = lp.data();
    let results = par::map_collect(b, |i| {
        let frames = input_lengths[i].min(t);
        ctc::ctc_nll(&lpd[i * t * v..], frames, v, &targets[i], blank)
    });
    let mut losses = Vec::with_capacity(b);
    let mut grad = vec![0.0; b * t * v];
    for (i, (loss, g)) in results.into_iter().enumerate() {
        losses.push(loss);
        grad[i * t * v..i * t * v + g.len()].copy_from_slice(&g);
    }
    log_probs.graph.push(
        Tensor::new(&[b], losses),
        Op::Ctc { x: log_probs.id, grad: Tensor::new(&[b, t, v], grad) },
        log_probs.requires_grad(),
    )
}

impl Graph {
    /// Convenience: constant scalar.
    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }
}
