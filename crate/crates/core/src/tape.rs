//! A small reverse-mode autodiff tape over rank-2 tensors.
//!
//! Ops are recorded in evaluation order; [`Tape::backward`] walks them in
//! reverse and accumulates adjoints. Parameters are borrowed from the caller
//! and never copied onto the tape.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{self, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside the tape (forward kinematics, for one).
pub trait CustomOp<S: Real>: Send + Sync {
    /// Adjoints for each input, given the recorded inputs, output and output adjoint.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Tensor<S>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: &[usize], b: &[usize]) -> Bcast {
    if a == b {
        Bcast::Same
    } else if b == [1, 1] {
        Bcast::Scalar
    } else if b[0] == 1 && b[1] == a[1] {
        Bcast::Row
    } else if b[1] == 1 && b[0] == a[0] {
        Bcast::Col
    } else {
        panic!("cannot broadcast {b:?} onto {a:?}");
    }
}

enum Op<S: Real> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var),
    Mul(Var, Var, Bcast),
    Scale(Var, S),
    AddScalar(Var),
    LayerNorm(Var, Vec<S>),
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Conv(Var, Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    MeanRows(Var),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    RowDiff(Var, S),
    SumSquares(Var),
    Sum(Var),
    Clamp01(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<S>>),
}

struct Node<S: Real> {
    op: Op<S>,
    // None for parameters, whose values live in the borrowed store
    value: Option<Tensor<S>>,
}

pub struct Tape<'p, S: Real> {
    params: &'p [Tensor<S>],
    nodes: Vec<Node<S>>,
}

impl<'p, S: Real> Tape<'p, S> {
    pub fn new(params: &'p [Tensor<S>]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p [Tensor<S>] {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> S {
        self.value(v).data()[0]
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient is propagated past it).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter {index} out of range");
        self.nodes.push(Node { op: Op::Param(index), value: None });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `a + b` where `b` matches `a` or broadcasts as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast_kind(av.shape(), bv.shape());
        let out = bcast_apply(av, bv, kind, |x, y| x + y);
        self.push(Op::Add(a, b, kind), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    /// Elementwise `a ⊙ b` with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast_kind(av.shape(), bv.shape());
        let out = bcast_apply(av, bv, kind, |x, y| x * y);
        self.push(Op::Mul(a, b, kind), out)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        let rstd = out.data_mut().chunks_mut(c).map(tensor::normalize_row).collect();
        self.push(Op::LayerNorm(a, rstd), out)
    }

    /// Softmax across the columns of every row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = tensor::softmax_stable(self.value(a), tensor::Axis::Cols);
        self.push(Op::Softmax(a), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::silu);
        self.push(Op::Silu(a), out)
    }

    /// Same-padded depthwise convolution; `w` is `[channels × k]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Var {
        let out = tensor::depthwise_conv1d(self.value(x), self.value(w)).expect("depthwise_conv1d shapes");
        self.push(Op::Conv(x, w), out)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.dims();
        let lk = kv.rows();
        assert_eq!(d % heads, 0, "latent dim {d} not divisible by {heads}");
        assert_eq!(kv.dims(), (lk, d));
        assert_eq!(vv.dims(), (lk, d));
        let (out, probs) = tensor::attention_forward(qv.data(), kv.data(), vv.data(), lq, lk, d, heads);
        self.push(Op::Attention { q, k, v, heads, probs }, Tensor::from_parts(vec![lq, d], out))
    }

    /// Mean over rows, giving `[1 × cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims();
        let mut out = vec![S::zero(); c];
        for row in av.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = S::one() / S::of(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanRows(a), Tensor::from_parts(vec![1, c], out))
    }

    /// Repeats a `[1 × C]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1);
        let out = Tensor::from_parts(vec![rows, av.cols()], av.data().repeat(rows));
        self.push(Op::BroadcastRows(a), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims();
        assert!(start + len <= c && len > 0);
        let mut out = Vec::with_capacity(r * len);
        for row in av.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), Tensor::from_parts(vec![r, len], out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims();
        assert!(start + len <= r && len > 0);
        let out = av.data()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows(a, start), Tensor::from_parts(vec![len, c], out))
    }

    /// Column gather; indices may repeat.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims();
        assert!(!idx.is_empty() && idx.iter().all(|&i| i < c));
        let mut out = Vec::with_capacity(r * idx.len());
        for row in av.data().chunks(c) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        self.push(Op::GatherCols(a, idx.to_vec()), Tensor::from_parts(vec![r, idx.len()], out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_parts(vec![r, total], out))
    }

    /// Forward difference along rows scaled by `factor`: row `i` is
    /// `(a[i+1] − a[i])·factor`.
    pub fn row_diff(&mut self, a: Var, factor: S) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims();
        assert!(r >= 2, "row_diff needs at least two rows");
        let d = av.data();
        let out = (0..(r - 1) * c).map(|i| (d[i + c] - d[i]) * factor).collect();
        self.push(Op::RowDiff(a, factor), Tensor::from_parts(vec![r - 1, c], out))
    }

    /// `Σ x²` as a `[1×1]` tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push(Op::SumSquares(a), Tensor::scalar(s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(S::zero()).min(S::one()));
        self.push(Op::Clamp01(a), out)
    }

    /// Mean of squared differences over every entry.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = self.value(a).len();
        let d = self.sub(a, b);
        let ss = self.sum_squares(d);
        self.scale(ss, S::one() / S::of(n as f64))
    }

    /// `x·W + b` with `W` `[in×out]` and `b` `[1×out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Var {
        self.push(Op::Custom(inputs.to_vec(), op), output)
    }

    /// Reverse sweep from a `[1×1]` output.
    pub fn backward(&self, out: Var) -> Gradients<S> {
        assert_eq!(self.value(out).len(), 1, "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(S::one()));
        let mut param_grads: Vec<Option<Tensor<S>>> = (0..self.params.len()).map(|_| None).collect();

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => accumulate(&mut param_grads[*i], g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims();
                    let n = bv.cols();
                    let mut ga = vec![S::zero(); m * k];
                    tensor::matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![S::zero(); k * n];
                    tensor::matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], ga));
                    accumulate(&mut grads[b.0], Tensor::from_parts(vec![k, n], gb));
                }
                Op::Add(a, b, kind) => {
                    let gb = bcast_reduce(&g, self.value(*b).shape(), *kind);
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b, kind) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = bcast_apply(&g, bv, *kind, |x, y| x * y);
                    let prod = g.zip_map(av, |x, y| x * y);
                    accumulate(&mut grads[b.0], bcast_reduce(&prod, bv.shape(), *kind));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.map(|x| x * *c)),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::LayerNorm(a, rstd) => {
                    let y = node.value.as_ref().unwrap();
                    let c = y.cols();
                    let n = S::of(c as f64);
                    let mut gx = vec![S::zero(); y.len()];
                    for (r, ((yr, gr), out)) in
                        y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)).enumerate()
                    {
                        let mg = gr.iter().copied().sum::<S>() / n;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / n;
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = rstd[r] * (gv - mg - yv * mgy);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(y.shape().to_vec(), gx));
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let c = y.cols();
                    let mut gx = vec![S::zero(); y.len()];
                    for ((yr, gr), out) in y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(y.shape().to_vec(), gx));
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * tensor::gelu_grad(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * tensor::silu_grad(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Conv(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (l, d) = xv.dims();
                    let k = wv.cols();
                    let half = (k / 2) as isize;
                    let mut gx = vec![S::zero(); l * d];
                    let mut gw = vec![S::zero(); d * k];
                    let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                    for j in 0..k {
                        let shift = j as isize - half;
                        let (t0, t1) = tensor::valid_range(l, shift);
                        for t in t0..t1 {
                            let src = (t as isize + shift) as usize;
                            for c in 0..d {
                                let gv = gd[t * d + c];
                                gx[src * d + c] += wd[c * k + j] * gv;
                                gw[c * k + j] += xd[src * d + c] * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![l, d], gx));
                    accumulate(&mut grads[w.0], Tensor::from_parts(vec![d, k], gw));
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (gq, gk, gv) =
                        attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &g);
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::MeanRows(a) => {
                    let r = self.value(*a).rows();
                    let inv = S::one() / S::of(r as f64);
                    let row: Vec<S> = g.data().iter().map(|&x| x * inv).collect();
                    let c = row.len();
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![r, c], row.repeat(r)));
                }
                Op::BroadcastRows(a) => {
                    let c = g.cols();
                    let mut row = vec![S::zero(); c];
                    for gr in g.data().chunks(c) {
                        for (o, &x) in row.iter_mut().zip(gr) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![1, c], row));
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).dims();
                    let len = g.cols();
                    let mut ga = vec![S::zero(); r * c];
                    for (i, gr) in g.data().chunks(len).enumerate() {
                        ga[i * c + start..i * c + start + len].copy_from_slice(gr);
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![r, c], ga));
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).dims();
                    let mut ga = vec![S::zero(); r * c];
                    ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![r, c], ga));
                }
                Op::GatherCols(a, idx) => {
                    let (r, c) = self.value(*a).dims();
                    let mut ga = vec![S::zero(); r * c];
                    for (i, gr) in g.data().chunks(idx.len()).enumerate() {
                        for (&col, &x) in idx.iter().zip(gr) {
                            ga[i * c + col] += x;
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![r, c], ga));
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).dims();
                        let mut gp = Vec::with_capacity(r * c);
                        for gr in g.data().chunks(total) {
                            gp.extend_from_slice(&gr[off..off + c]);
                        }
                        off += c;
                        accumulate(&mut grads[p.0], Tensor::from_parts(vec![r, c], gp));
                    }
                }
                Op::RowDiff(a, factor) => {
                    let (r, c) = self.value(*a).dims();
                    let mut ga = vec![S::zero(); r * c];
                    for (i, &x) in g.data().iter().enumerate() {
                        ga[i + c] += x * *factor;
                        ga[i] -= x * *factor;
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![r, c], ga));
                }
                Op::SumSquares(a) => {
                    let s = g.data()[0] + g.data()[0];
                    accumulate(&mut grads[a.0], self.value(*a).map(|x| x * s));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads[a.0], Tensor::full(self.value(*a).shape(), s));
                }
                Op::Clamp01(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| {
                        if x >= S::zero() && x <= S::one() {
                            gv
                        } else {
                            S::zero()
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = op.backward(&ins, node.value.as_ref().unwrap(), &g);
                    for (v, gi) in inputs.iter().zip(gs) {
                        accumulate(&mut grads[v.0], gi);
                    }
                }
            }
        }
        Gradients { params: param_grads, shapes: self.params.iter().map(|p| p.shape().to_vec()).collect() }
    }
}

fn accumulate<S: Real>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(t) => {
            debug_assert_eq!(t.shape(), g.shape());
            for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn bcast_apply<S: Real>(a: &Tensor<S>, b: &Tensor<S>, kind: Bcast, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let (r, c) = a.dims();
    let (ad, bd) = (a.data(), b.data());
    let data = match kind {
        Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
        Bcast::Row => ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect(),
        Bcast::Col => ad.iter().enumerate().map(|(i, &x)| f(x, bd[i / c])).collect(),
    };
    Tensor::from_parts(vec![r, c], data)
}

fn bcast_reduce<S: Real>(g: &Tensor<S>, shape: &[usize], kind: Bcast) -> Tensor<S> {
    let c = g.cols();
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.data().iter().copied().sum()),
        Bcast::Row => {
            let mut out = vec![S::zero(); c];
            for row in g.data().chunks(c) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Bcast::Col => {
            let out = g.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
            Tensor::from_parts(shape.to_vec(), out)
        }
    }
}

fn attention_backward<S: Real>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    probs: &[S],
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (lq, d) = q.dims();
    let lk = k.rows();
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut gq = vec![S::zero(); lq * d];
    let mut gk = vec![S::zero(); lk * d];
    let mut gv = vec![S::zero(); lk * d];
    let mut dp = vec![S::zero(); lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let go = &gd[i * d + off..i * d + off + dh];
            let mut dot = S::zero();
            for j in 0..lk {
                let vj = &vd[j * d + off..j * d + off + dh];
                let mut acc = S::zero();
                for (&a, &b) in go.iter().zip(vj) {
                    acc += a * b;
                }
                dp[j] = acc;
                dot += p[j] * acc;
                let gvj = &mut gv[j * d + off..j * d + off + dh];
                for (o, &a) in gvj.iter_mut().zip(go) {
                    *o += p[j] * a;
                }
            }
            for j in 0..lk {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == S::zero() {
                    continue;
                }
                for c in 0..dh {
                    gq[i * d + off + c] += ds * kd[j * d + off + c];
                    gk[j * d + off + c] += ds * qd[i * d + off + c];
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![lq, d], gq),
        Tensor::from_parts(vec![lk, d], gk),
        Tensor::from_parts(vec![lk, d], gv),
    )
}

/// Parameter adjoints produced by [`Tape::backward`].
pub struct Gradients<S: Real> {
    params: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of parameter `i`, or `None` if it did not influence the output.
    pub fn param(&self, i: usize) -> Option<&Tensor<S>> {
        self.params[i].as_ref()
    }

    /// Dense gradients for every parameter, zeros where untouched.
    pub fn into_dense(self) -> Vec<Tensor<S>> {
        self.params
            .into_iter()
            .zip(self.shapes)
            .map(|(g, s)| g.unwrap_or_else(|| Tensor::zeros(&s)))
            .collect()
    }
}
