//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every node that depends on
//! a leaf created with `requires_grad`.

use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Broadcast pattern for per-row vectors `v: [A, M]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    /// `x` viewed as `[A, M, R]`; `v` repeats over the trailing `R` axis
    /// (per-channel modulation of `[B, C, H, W]` maps).
    Mid,
    /// `x` viewed as `[A, R, M]`; `v` repeats over the middle `R` axis
    /// (per-feature modulation of `[B, N, D]` token sequences).
    Last,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SwapLast2(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    Silu(Var),
    SoftmaxLast(Var),
    BMul {
        x: Var,
        v: Var,
        mode: Bcast,
    },
    BAdd {
        x: Var,
        v: Var,
        mode: Bcast,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    Clamp01(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [m, n] => (1, m, n),
        [b, m, n] => (b, m, n),
        ref s => panic!("expected rank 2 or 3, got {s:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            false,
        );
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ba, m, k) = batch_dims(self.shape(a));
        let (bb, r1, r2) = batch_dims(self.shape(b));
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        assert!(ba == bb && k == kb, "bmm {:?} x {:?}", self.shape(a), self.shape(b));
        let mut out = Tensor::zeros(&[ba, m, n]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(out, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    /// `[B, M, N] -> [B, N, M]` (rank-2 input is treated as `B = 1`).
    pub fn swap_last2(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (b, m, n) = batch_dims(&shape);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            let base = i * m * n;
            for r in 0..m {
                for c in 0..n {
                    out[base + c * m + r] = src[base + r * n + c];
                }
            }
        }
        let new_shape = if shape.len() == 2 { vec![n, m] } else { vec![b, n, m] };
        let t = Tensor::new(&new_shape, out).expect("same size");
        self.push(t, Op::SwapLast2(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape size");
        self.push(t, Op::Reshape(a), &[a])
    }

    /// 2-D convolution of `x: [B, Ci, H, W]` with `w: [Co, Ci, k, k]` and
    /// bias `b: [Co]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 4 && ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3],
            "conv {xs:?} * {ws:?}"
        );
        assert_eq!(self.value(b).len(), ws[0]);
        let k = ws[2];
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out: (xs[2] + 2 * pad - k) / stride + 1,
            w_out: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out2 = vec![0.0; geom.c_out * geom.cols()];
        gemm(
            geom.c_out,
            geom.rows(),
            geom.cols(),
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out2,
            false,
        );
        let hw = geom.h_out * geom.w_out;
        let bias = self.value(b).data();
        let mut out = vec![0.0; out2.len()];
        for bi in 0..geom.batch {
            for co in 0..geom.c_out {
                let src = &out2[co * geom.cols() + bi * hw..co * geom.cols() + (bi + 1) * hw];
                let dst = &mut out[(bi * geom.c_out + co) * hw..(bi * geom.c_out + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let t = Tensor::new(&[geom.batch, geom.c_out, geom.h_out, geom.w_out], out).expect("conv size");
        let keep = if self.nodes[w.0].needs_grad { cols } else { Vec::new() };
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep,
            },
            &[x, w, b],
        )
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out).expect("upsample size");
        self.push(t, Op::Upsample2x(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(t, Op::Silu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(t.shape(), out).expect("same shape");
        self.push(t, Op::SoftmaxLast(x), &[x])
    }

    fn bcast_dims(&self, x: Var, v: Var) -> (usize, usize, usize) {
        let vs = self.shape(v);
        assert_eq!(vs.len(), 2, "broadcast vector must be [A, M]");
        let (a, m) = (vs[0], vs[1]);
        let n = self.value(x).len();
        assert!(
            a * m > 0 && n.is_multiple_of(a * m),
            "cannot broadcast {vs:?} over {:?}",
            self.shape(x)
        );
        (a, m, n / (a * m))
    }

    fn bcast_map(&self, x: Var, v: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, m, r) = self.bcast_dims(x, v);
        let xv = self.value(x);
        let vv = self.value(v).data();
        let mut out = xv.data().to_vec();
        for ai in 0..a {
            let block = &mut out[ai * m * r..(ai + 1) * m * r];
            match mode {
                Bcast::Mid => {
                    for mi in 0..m {
                        let s = vv[ai * m + mi];
                        for e in &mut block[mi * r..(mi + 1) * r] {
                            *e = f(*e, s);
                        }
                    }
                }
                Bcast::Last => {
                    for row in block.chunks_exact_mut(m) {
                        for (e, s) in row.iter_mut().zip(&vv[ai * m..(ai + 1) * m]) {
                            *e = f(*e, *s);
                        }
                    }
                }
            }
        }
        Tensor::new(xv.shape(), out).expect("same shape")
    }

    pub fn bmul(&mut self, x: Var, v: Var, mode: Bcast) -> Var {
        let t = self.bcast_map(x, v, mode, |e, s| e * s);
        self.push(t, Op::BMul { x, v, mode }, &[x, v])
    }

    pub fn badd(&mut self, x: Var, v: Var, mode: Bcast) -> Var {
        let t = self.bcast_map(x, v, mode, |e, s| e + s);
        self.push(t, Op::BAdd { x, v, mode }, &[x, v])
    }

    /// Columns `start..start + len` of the last axis of `[A, L]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert!(start + len <= s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len);
        for row in src.chunks_exact(s[1]) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(&[s[0], len], out).expect("slice size");
        self.push(t, Op::SliceLast { x, start }, &[x])
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.clamp(0.0, 1.0));
        self.push(t, Op::Clamp01(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        self.backward_from(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.len(), self.value(out).len(), "seed gradient shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.reshape(self.shape(out)).expect("seed size"));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.nodes[v.0].needs_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || elementwise(g, vb, |x, y| x * y));
                self.acc_with(grads, *b, || elementwise(g, va, |x, y| x * y));
            }
            Op::Scale(a, s) => self.acc_with(grads, *a, || g.map(|v| v * s)),
            Op::AddScalar(a) => self.acc_with(grads, *a, || g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                self.acc_with(grads, *a, || {
                    let mut d = Tensor::zeros(va.shape());
                    gemm(m, n, k, g.data(), false, vb.data(), true, d.data_mut(), false);
                    d
                });
                self.acc_with(grads, *b, || {
                    let mut d = Tensor::zeros(vb.shape());
                    gemm(k, m, n, va.data(), true, g.data(), false, d.data_mut(), false);
                    d
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bt, m, k) = batch_dims(va.shape());
                let n = g.len() / (bt * m);
                let trans_b = *trans_b;
                self.acc_with(grads, *a, || {
                    let mut d = Tensor::zeros(va.shape());
                    for i in 0..bt {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut d.data_mut()[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    d
                });
                self.acc_with(grads, *b, || {
                    let mut d = Tensor::zeros(vb.shape());
                    for i in 0..bt {
                        let gs = &g.data()[i * m * n..(i + 1) * m * n];
                        let as_ = &va.data()[i * m * k..(i + 1) * m * k];
                        let ds = &mut d.data_mut()[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gs, true, as_, false, ds, false);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, ds, false);
                        }
                    }
                    d
                });
            }
            Op::SwapLast2(a) => {
                let (b, m, n) = batch_dims(node.value.shape());
                self.acc_with(grads, *a, || {
                    let mut out = vec![0.0; g.len()];
                    for bi in 0..b {
                        let base = bi * m * n;
                        for r in 0..m {
                            for c in 0..n {
                                out[base + c * m + r] = g.data()[base + r * n + c];
                            }
                        }
                    }
                    Tensor::new(self.shape(*a), out).expect("same size")
                });
            }
            Op::Reshape(a) => {
                self.acc_with(grads, *a, || g.clone().reshape(self.shape(*a)).expect("same size"));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let geom = *geom;
                let hw = geom.h_out * geom.w_out;
                // [B, Co, HW] -> [Co, B * HW]
                let mut g2 = vec![0.0; g.len()];
                for bi in 0..geom.batch {
                    for co in 0..geom.c_out {
                        g2[co * geom.cols() + bi * hw..co * geom.cols() + (bi + 1) * hw]
                            .copy_from_slice(&g.data()[(bi * geom.c_out + co) * hw..(bi * geom.c_out + co + 1) * hw]);
                    }
                }
                self.acc_with(grads, *b, || {
                    let data = g2.chunks_exact(geom.cols()).map(|r| r.iter().sum()).collect();
                    Tensor::new(&[geom.c_out], data).expect("bias size")
                });
                self.acc_with(grads, *w, || {
                    let mut d = Tensor::zeros(self.shape(*w));
                    gemm(
                        geom.c_out,
                        geom.cols(),
                        geom.rows(),
                        &g2,
                        false,
                        cols,
                        true,
                        d.data_mut(),
                        false,
                    );
                    d
                });
                self.acc_with(grads, *x, || {
                    let mut dcols = vec![0.0; geom.rows() * geom.cols()];
                    gemm(
                        geom.rows(),
                        geom.c_out,
                        geom.cols(),
                        self.value(*w).data(),
                        true,
                        &g2,
                        false,
                        &mut dcols,
                        false,
                    );
                    Tensor::new(self.shape(*x), col2im(&dcols, &geom)).expect("input size")
                });
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                self.acc_with(grads, *x, || {
                    let mut out = vec![0.0; bc * h * w];
                    for p in 0..bc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                out[(p * h + y / 2) * w + xx / 2] += g.data()[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    Tensor::new(&s, out).expect("same size")
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                self.acc_with(grads, *x, || {
                    elementwise(g, xv, |gv, v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                });
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let n = *y.shape().last().expect("rank >= 1");
                self.acc_with(grads, *x, || {
                    let mut out = vec![0.0; g.len()];
                    for ((o, yr), gr) in out
                        .chunks_exact_mut(n)
                        .zip(y.data().chunks_exact(n))
                        .zip(g.data().chunks_exact(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    Tensor::new(y.shape(), out).expect("same size")
                });
            }
            Op::BMul { x, v, mode } => {
                let (a, m, r) = self.bcast_dims(*x, *v);
                let xv = self.value(*x);
                let vv = self.value(*v);
                self.acc_with(grads, *x, || {
                    let mut out = g.clone();
                    bcast_apply(out.data_mut(), vv.data(), a, m, r, *mode, |e, s| e * s);
                    out.reshape(xv.shape()).expect("same size")
                });
                self.acc_with(grads, *v, || {
                    let prod = elementwise(g, xv, |p, q| p * q);
                    Tensor::new(vv.shape(), bcast_reduce(prod.data(), a, m, r, *mode)).expect("vec size")
                });
            }
            Op::BAdd { x, v, mode } => {
                let (a, m, r) = self.bcast_dims(*x, *v);
                let vshape = self.shape(*v).to_vec();
                self.acc_with(grads, *x, || g.clone());
                self.acc_with(grads, *v, || {
                    Tensor::new(&vshape, bcast_reduce(g.data(), a, m, r, *mode)).expect("vec size")
                });
            }
            Op::SliceLast { x, start } => {
                let s = self.shape(*x).to_vec();
                let len = node.value.shape()[1];
                self.acc_with(grads, *x, || {
                    let mut out = Tensor::zeros(&s);
                    for (row, grow) in out.data_mut().chunks_exact_mut(s[1]).zip(g.data().chunks_exact(len)) {
                        row[*start..*start + len].copy_from_slice(grow);
                    }
                    out
                });
            }
            Op::Clamp01(x) => {
                let xv = self.value(*x);
                self.acc_with(grads, *x, || {
                    elementwise(g, xv, |gv, v| if (0.0..=1.0).contains(&v) { gv } else { 0.0 })
                });
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.item() / xv.len() as f64;
                self.acc_with(grads, *x, || Tensor::filled(xv.shape(), s));
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape(), data).expect("same size")
}

fn bcast_apply(out: &mut [f64], v: &[f64], a: usize, m: usize, r: usize, mode: Bcast, f: impl Fn(f64, f64) -> f64) {
    for ai in 0..a {
        let block = &mut out[ai * m * r..(ai + 1) * m * r];
        match mode {
            Bcast::Mid => {
                for mi in 0..m {
                    for e in &mut block[mi * r..(mi + 1) * r] {
                        *e = f(*e, v[ai * m + mi]);
                    }
                }
            }
            Bcast::Last => {
                for row in block.chunks_exact_mut(m) {
                    for (e, s) in row.iter_mut().zip(&v[ai * m..(ai + 1) * m]) {
                        *e = f(*e, *s);
                    }
                }
            }
        }
    }
}

fn bcast_reduce(src: &[f64], a: usize, m: usize, r: usize, mode: Bcast) -> Vec<f64> {
    let mut out = vec![0.0; a * m];
    for ai in 0..a {
        let block = &src[ai * m * r..(ai + 1) * m * r];
        match mode {
            Bcast::Mid => {
                for mi in 0..m {
                    out[ai * m + mi] = block[mi * r..(mi + 1) * r].iter().sum();
                }
            }
            Bcast::Last => {
                for row in block.chunks_exact(m) {
                    for (o, e) in out[ai * m..(ai + 1) * m].iter_mut().zip(row) {
                        *o += e;
                    }
                }
            }
        }
    }
    out
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw_out, ncols) = (g.h_out * g.w_out, g.cols());
    let mut cols = vec![0.0; g.rows() * ncols];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.c_in + ci) * g.h * g.w..(b * g.c_in + ci + 1) * g.h * g.w];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = b * hw_out + oy * g.w_out;
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw_out, ncols) = (g.h_out * g.w_out, g.cols());
    let mut x = vec![0.0; g.batch * g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.c_in + ci) * g.h * g.w..(b * g.c_in + ci + 1) * g.h * g.w];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = b * hw_out + oy * g.w_out;
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
