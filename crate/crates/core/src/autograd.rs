//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters are
//! bound lazily through [`Graph::param`]: the first use of a [`Param`] creates
//! a leaf and later uses share it, so gradients from every use accumulate.
//! Only parameters registered as trainable receive gradients; everything else
//! (frozen networks, detached values, inputs) is a constant.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::kernels::{
    chunk_len, col2im_strided, conv_forward_batch, conv_transpose_forward_batch, im2col_strided, to_channel_major,
    to_sample_major, transposed_out, ConvGeom,
};
use crate::nn::{Param, ParamId};
use crate::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(F, F)> },
    LeakyRelu { x: Var, slope: F },
    Tanh { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel { w: Var, y: Var },
    Scale { x: Var, c: F },
    Sum(Vec<Var>),
    CatChannels(Vec<Var>),
    CatBatch(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    SliceBatch { x: Var, start: usize },
    SoftmaxChannels { x: Var },
    MeanAbsDiff { a: Var, b: Var },
    SoftplusMean { x: Var, sign: F },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    trainable: HashSet<ParamId>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    /// A graph where every parameter is a constant (inference).
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), bound: RefCell::new(HashMap::new()), trainable: HashSet::new() }
    }

    /// A graph whose gradients flow to the given parameters only.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self { trainable: ids.into_iter().collect(), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// A constant input.
    pub fn input(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A constant copy of `v`'s value; gradients do not flow through it.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, p: &Param<F>) -> Var {
        if let Some(&v) = self.bound.borrow().get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, self.trainable.contains(&p.id()));
        self.bound.borrow_mut().insert(p.id(), v);
        v
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4();
        let (cout, cin, k, k2) = wv.dims4();
        assert_eq!(cin, c, "conv2d input channels {c} != weight channels {cin}");
        assert_eq!(k, k2);
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
        assert!(geom.valid(), "conv2d kernel larger than padded input");
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let bv = b.map(|b| self.value(b));
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        conv_forward_batch(xv.data(), n, &geom, wv.data(), bv.as_ref().map(|b| b.data()), cout, out.data_mut());
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        self.push(out, Op::Conv { x, w, b, geom, cout }, rg)
    }

    /// Transposed convolution; weight layout `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = xv.dims4();
        let (wcin, cout, k, _) = wv.dims4();
        assert_eq!(wcin, cin, "conv_transpose2d channel mismatch");
        let (oh, ow) = (transposed_out(h, k, stride, pad), transposed_out(wd, k, stride, pad));
        let geom = ConvGeom { channels: cout, height: oh, width: ow, kernel: k, stride, pad };
        assert_eq!((geom.out_height(), geom.out_width()), (h, wd), "non-invertible transposed geometry");
        let bv = b.map(|b| self.value(b));
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        conv_transpose_forward_batch(xv.data(), n, &geom, wv.data(), bv.as_ref().map(|b| b.data()), cin, out.data_mut());
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        self.push(out, Op::ConvT { x, w, b, geom, cin }, rg)
    }

    /// Per-sample, per-channel normalization with affine `gamma`/`beta`.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (n, c, h, w) = xv.dims4();
        let m = h * w;
        let mf = F::lit(m as f64);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut stats = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * m;
                let xs = &xv.data()[off..off + m];
                let mean = xs.iter().copied().sum::<F>() / mf;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
                let inv = F::one() / (var + F::lit(eps)).sqrt();
                let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                for (o, &v) in out.data_mut()[off..off + m].iter_mut().zip(xs) {
                    *o = ga * (v - mean) * inv + be;
                }
                stats.push((mean, inv));
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        self.push(out, Op::InstanceNorm { x, gamma, beta, stats }, rg)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = F::lit(slope);
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        let rg = self.needs(&[x]);
        self.push(out, Op::LeakyRelu { x, slope: s }, rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.needs(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `w` is `[N, 1, H, W]`, broadcast over the channels of `y` (`[N, C, H, W]`).
    pub fn mul_channel(&self, w: Var, y: Var) -> Var {
        let wv = self.value(w);
        let yv = self.value(y);
        let (n, c, h, wd) = yv.dims4();
        assert_eq!(wv.shape(), &[n, 1, h, wd], "mul_channel weight shape");
        let m = h * wd;
        let mut out = Tensor::zeros(&[n, c, h, wd]);
        for i in 0..n {
            let ws = &wv.data()[i * m..(i + 1) * m];
            for ch in 0..c {
                let off = (i * c + ch) * m;
                for ((o, &yy), &ww) in out.data_mut()[off..off + m].iter_mut().zip(&yv.data()[off..off + m]).zip(ws) {
                    *o = ww * yy;
                }
            }
        }
        let rg = self.needs(&[w, y]);
        self.push(out, Op::MulChannel { w, y }, rg)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let c = F::lit(c);
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "sum of no tensors");
        let mut out = (*self.value(vars[0])).clone();
        for &v in &vars[1..] {
            out.add_assign(&self.value(v));
        }
        let rg = self.needs(vars);
        self.push(out, Op::Sum(vars.to_vec()), rg)
    }

    pub fn cat_channels(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let values: Vec<_> = vars.iter().map(|&v| self.value(v)).collect();
        let (n, _, h, w) = values[0].dims4();
        let m = h * w;
        let total: usize = values.iter().map(|t| t.dims4().1).sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for i in 0..n {
            let mut co = 0;
            for t in &values {
                let (tn, tc, th, tw) = t.dims4();
                assert_eq!((tn, th, tw), (n, h, w), "cat_channels shape mismatch");
                let src = &t.data()[i * tc * m..(i + 1) * tc * m];
                out.data_mut()[(i * total + co) * m..(i * total + co + tc) * m].copy_from_slice(src);
                co += tc;
            }
        }
        let rg = self.needs(vars);
        self.push(out, Op::CatChannels(vars.to_vec()), rg)
    }

    pub fn cat_batch(&self, vars: &[Var]) -> Var {
        let values: Vec<_> = vars.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor<F>> = values.iter().map(|r| r.as_ref()).collect();
        let out = Tensor::stack_batch(&refs);
        let rg = self.needs(vars);
        self.push(out, Op::CatBatch(vars.to_vec()), rg)
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(start + len <= c);
        let m = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for i in 0..n {
            out.data_mut()[i * len * m..(i + 1) * len * m]
                .copy_from_slice(&xv.data()[(i * c + start) * m..(i * c + start + len) * m]);
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::SliceChannels { x, start }, rg)
    }

    pub fn slice_batch(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        assert!(start + len <= n);
        let stride = xv.numel() / n;
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_vec(&shape, xv.data()[start * stride..(start + len) * stride].to_vec());
        let rg = self.needs(&[x]);
        self.push(out, Op::SliceBatch { x, start }, rg)
    }

    pub fn softmax_channels(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let m = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let src = xv.data();
        let dst = out.data_mut();
        for i in 0..n {
            for p in 0..m {
                let idx = |ch: usize| (i * c + ch) * m + p;
                let mx = (0..c).map(|ch| src[idx(ch)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for ch in 0..c {
                    let e = (src[idx(ch)] - mx).exp();
                    dst[idx(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[idx(ch)] = dst[idx(ch)] / z;
                }
            }
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::SoftmaxChannels { x }, rg)
    }

    /// Mean absolute difference over all elements; a scalar.
    pub fn mean_abs_diff(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff shape mismatch");
        let s: F = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / F::lit(av.numel() as f64));
        let rg = self.needs(&[a, b]);
        self.push(out, Op::MeanAbsDiff { a, b }, rg)
    }

    /// `mean(softplus(sign * x))`; with logits `x` this is binary cross-entropy
    /// against target 1 (`sign = -1`) or target 0 (`sign = +1`).
    pub fn softplus_mean(&self, x: Var, sign: f64) -> Var {
        let xv = self.value(x);
        let s = F::lit(sign);
        let total: F = xv.data().iter().map(|&v| softplus(s * v)).sum();
        let out = Tensor::scalar(total / F::lit(xv.numel() as f64));
        let rg = self.needs(&[x]);
        self.push(out, Op::SoftplusMean { x, sign: s }, rg)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let m = h * w;
        let mf = F::lit(m as f64);
        let data = (0..n * c).map(|i| xv.data()[i * m..(i + 1) * m].iter().copied().sum::<F>() / mf).collect();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool { x }, rg)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (n, din) = (xv.shape()[0], xv.shape()[1]);
        let dout = wv.shape()[0];
        assert_eq!(wv.shape()[1], din, "linear input width mismatch");
        let mut out = Tensor::zeros(&[n, dout]);
        gemm(MatRef::new(xv.data(), n, din), MatRef::t(wv.data(), dout, din), out.data_mut(), false);
        for row in out.data_mut().chunks_mut(dout) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.needs(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n);
        let mut total = F::zero();
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            assert!(y < k, "label {y} out of range for {k} classes");
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / F::lit(n as f64));
        let rg = self.needs(&[logits]);
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec() }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), F::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            backward_node(&nodes, node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads, bound: self.bound.borrow().clone() }
    }
}

fn softplus<F: Real>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln()
}

pub(crate) fn softmax_row<F: Real>(row: &[F]) -> Vec<F> {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn accumulate<F: Real>(nodes: &[Node<F>], grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn rg<F>(nodes: &[Node<F>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_node<F: Real>(nodes: &[Node<F>], node: &Node<F>, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
    let val = |v: Var| -> &Tensor<F> { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Conv { x, w, b, geom, cout } => {
            let xv = val(*x);
            let wv = val(*w);
            let n = xv.shape()[0];
            let in_stride = geom.channels * geom.height * geom.width;
            let hw = geom.col_cols();
            let out_stride = cout * hw;
            let rows = geom.col_rows();
            let need_w = rg(nodes, *w);
            let need_x = rg(nodes, *x);
            let mut dw = Tensor::zeros(wv.shape());
            let mut dx = Tensor::zeros(xv.shape());
            let chunk = chunk_len(rows, hw, n);
            let mut cols = vec![F::zero(); rows * chunk * hw];
            let mut gm = vec![F::zero(); cout * chunk * hw];
            let mut start = 0;
            while start < n {
                let len = chunk.min(n - start);
                let ld = len * hw;
                to_channel_major(&gy.data()[start * out_stride..(start + len) * out_stride], len, *cout, hw, &mut gm);
                let gmat = MatRef::new(&gm[..cout * ld], *cout, ld);
                if need_w {
                    for i in 0..len {
                        let xi = &xv.data()[(start + i) * in_stride..(start + i + 1) * in_stride];
                        im2col_strided(xi, geom, &mut cols, ld, i * hw);
                    }
                    gemm(gmat, MatRef::t(&cols[..rows * ld], rows, ld), dw.data_mut(), true);
                }
                if need_x {
                    gemm(MatRef::t(wv.data(), *cout, rows), gmat, &mut cols[..rows * ld], false);
                    for i in 0..len {
                        let dxi = &mut dx.data_mut()[(start + i) * in_stride..(start + i + 1) * in_stride];
                        col2im_strided(&cols, geom, dxi, ld, i * hw);
                    }
                }
                start += len;
            }
            if let Some(b) = b {
                if rg(nodes, *b) {
                    accumulate(nodes, grads, *b, channel_sums(gy, n, *cout, hw));
                }
            }
            if need_w {
                accumulate(nodes, grads, *w, dw);
            }
            if need_x {
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::ConvT { x, w, b, geom, cin } => {
            let xv = val(*x);
            let wv = val(*w);
            let n = xv.shape()[0];
            let hw_in = geom.col_cols();
            let rows = geom.col_rows();
            let out_stride = geom.channels * geom.height * geom.width;
            let in_stride = cin * hw_in;
            let need_w = rg(nodes, *w);
            let need_x = rg(nodes, *x);
            let mut dw = Tensor::zeros(wv.shape());
            let mut dx = Tensor::zeros(xv.shape());
            let chunk = chunk_len(rows, hw_in, n);
            let mut dcols = vec![F::zero(); rows * chunk * hw_in];
            let mut xm = vec![F::zero(); cin * chunk * hw_in];
            let mut start = 0;
            while start < n {
                let len = chunk.min(n - start);
                let ld = len * hw_in;
                for i in 0..len {
                    let gi = &gy.data()[(start + i) * out_stride..(start + i + 1) * out_stride];
                    im2col_strided(gi, geom, &mut dcols, ld, i * hw_in);
                }
                let dmat = MatRef::new(&dcols[..rows * ld], rows, ld);
                if need_x {
                    gemm(MatRef::new(wv.data(), *cin, rows), dmat, &mut xm[..cin * ld], false);
                    let dst = &mut dx.data_mut()[start * in_stride..(start + len) * in_stride];
                    to_sample_major(&xm[..cin * ld], len, *cin, hw_in, dst);
                }
                if need_w {
                    to_channel_major(&xv.data()[start * in_stride..(start + len) * in_stride], len, *cin, hw_in, &mut xm);
                    gemm(MatRef::new(&xm[..cin * ld], *cin, ld), MatRef::t(&dcols[..rows * ld], rows, ld), dw.data_mut(), true);
                }
                start += len;
            }
            if let Some(b) = b {
                if rg(nodes, *b) {
                    accumulate(nodes, grads, *b, channel_sums(gy, n, geom.channels, geom.height * geom.width));
                }
            }
            if need_w {
                accumulate(nodes, grads, *w, dw);
            }
            if need_x {
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::InstanceNorm { x, gamma, beta, stats } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let (n, c, h, w) = xv.dims4();
            let m = h * w;
            let mf = F::lit(m as f64);
            let mut dx = Tensor::zeros(xv.shape());
            let mut dgamma = Tensor::zeros(gv.shape());
            let mut dbeta = Tensor::zeros(gv.shape());
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * m;
                    let (mean, inv) = stats[i * c + ch];
                    let xs = &xv.data()[off..off + m];
                    let gs = &gy.data()[off..off + m];
                    let mut sum_g = F::zero();
                    let mut sum_gx = F::zero();
                    for (&xx, &gg) in xs.iter().zip(gs) {
                        let xhat = (xx - mean) * inv;
                        sum_g += gg;
                        sum_gx += gg * xhat;
                    }
                    dgamma.data_mut()[ch] += sum_gx;
                    dbeta.data_mut()[ch] += sum_g;
                    let ga = gv.data()[ch];
                    let scale = ga * inv / mf;
                    for ((d, &xx), &gg) in dx.data_mut()[off..off + m].iter_mut().zip(xs).zip(gs) {
                        let xhat = (xx - mean) * inv;
                        *d = scale * (mf * gg - sum_g - xhat * sum_gx);
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::LeakyRelu { x, slope } => {
            let xv = val(*x);
            let dx = xv.zip_map(gy, |v, g| if v > F::zero() { g } else { g * *slope });
            accumulate(nodes, grads, *x, dx);
        }
        Op::Tanh { x } => {
            let dx = node.value.zip_map(gy, |y, g| g * (F::one() - y * y));
            accumulate(nodes, grads, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gy.clone());
            accumulate(nodes, grads, *b, gy.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, gy.clone());
            accumulate(nodes, grads, *b, gy.map(|g| -g));
        }
        Op::Mul(a, b) => {
            if rg(nodes, *a) {
                accumulate(nodes, grads, *a, gy.zip_map(val(*b), |g, y| g * y));
            }
            if rg(nodes, *b) {
                accumulate(nodes, grads, *b, gy.zip_map(val(*a), |g, y| g * y));
            }
        }
        Op::MulChannel { w, y } => {
            let wv = val(*w);
            let yv = val(*y);
            let (n, c, h, wd) = yv.dims4();
            let m = h * wd;
            if rg(nodes, *w) {
                let mut dw = Tensor::zeros(wv.shape());
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * m;
                        let dst = &mut dw.data_mut()[i * m..(i + 1) * m];
                        for ((d, &g), &yy) in dst.iter_mut().zip(&gy.data()[off..off + m]).zip(&yv.data()[off..off + m]) {
                            *d += g * yy;
                        }
                    }
                }
                accumulate(nodes, grads, *w, dw);
            }
            if rg(nodes, *y) {
                let mut dy = Tensor::zeros(yv.shape());
                for i in 0..n {
                    let ws = &wv.data()[i * m..(i + 1) * m];
                    for ch in 0..c {
                        let off = (i * c + ch) * m;
                        for ((d, &g), &ww) in dy.data_mut()[off..off + m].iter_mut().zip(&gy.data()[off..off + m]).zip(ws) {
                            *d = g * ww;
                        }
                    }
                }
                accumulate(nodes, grads, *y, dy);
            }
        }
        Op::Scale { x, c } => accumulate(nodes, grads, *x, gy.map(|g| g * *c)),
        Op::Sum(vars) => {
            for &v in vars {
                accumulate(nodes, grads, v, gy.clone());
            }
        }
        Op::CatChannels(vars) => {
            let (n, total, h, w) = gy.dims4();
            let m = h * w;
            let mut co = 0;
            for &v in vars {
                let tc = val(v).dims4().1;
                if rg(nodes, v) {
                    let mut d = Tensor::zeros(&[n, tc, h, w]);
                    for i in 0..n {
                        d.data_mut()[i * tc * m..(i + 1) * tc * m]
                            .copy_from_slice(&gy.data()[(i * total + co) * m..(i * total + co + tc) * m]);
                    }
                    accumulate(nodes, grads, v, d);
                }
                co += tc;
            }
        }
        Op::CatBatch(vars) => {
            let mut offset = 0;
            for &v in vars {
                let len = val(v).numel();
                if rg(nodes, v) {
                    let d = Tensor::from_vec(val(v).shape(), gy.data()[offset..offset + len].to_vec());
                    accumulate(nodes, grads, v, d);
                }
                offset += len;
            }
        }
        Op::SliceChannels { x, start } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let len = gy.dims4().1;
            let m = h * w;
            let mut d = Tensor::zeros(xv.shape());
            for i in 0..n {
                d.data_mut()[(i * c + start) * m..(i * c + start + len) * m]
                    .copy_from_slice(&gy.data()[i * len * m..(i + 1) * len * m]);
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::SliceBatch { x, start } => {
            let xv = val(*x);
            let stride = xv.numel() / xv.shape()[0];
            let mut d = Tensor::zeros(xv.shape());
            d.data_mut()[start * stride..start * stride + gy.numel()].copy_from_slice(gy.data());
            accumulate(nodes, grads, *x, d);
        }
        Op::SoftmaxChannels { x } => {
            let y = &node.value;
            let (n, c, h, w) = y.dims4();
            let m = h * w;
            let mut d = Tensor::zeros(y.shape());
            for i in 0..n {
                for p in 0..m {
                    let idx = |ch: usize| (i * c + ch) * m + p;
                    let dot: F = (0..c).map(|ch| y.data()[idx(ch)] * gy.data()[idx(ch)]).sum();
                    for ch in 0..c {
                        d.data_mut()[idx(ch)] = y.data()[idx(ch)] * (gy.data()[idx(ch)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::MeanAbsDiff { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let g = gy.item() / F::lit(av.numel() as f64);
            let da = av.zip_map(bv, |x, y| {
                if x > y {
                    g
                } else if x < y {
                    -g
                } else {
                    F::zero()
                }
            });
            if rg(nodes, *b) {
                accumulate(nodes, grads, *b, da.map(|v| -v));
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::SoftplusMean { x, sign } => {
            let xv = val(*x);
            let g = gy.item() / F::lit(xv.numel() as f64);
            let s = *sign;
            accumulate(nodes, grads, *x, xv.map(|v| g * s * sigmoid(s * v)));
        }
        Op::GlobalAvgPool { x } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let m = h * w;
            let inv = F::one() / F::lit(m as f64);
            let mut d = Tensor::zeros(xv.shape());
            for i in 0..n * c {
                let g = gy.data()[i] * inv;
                d.data_mut()[i * m..(i + 1) * m].fill(g);
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::Linear { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let (n, din) = (xv.shape()[0], xv.shape()[1]);
            let dout = wv.shape()[0];
            if rg(nodes, *x) {
                let mut dx = Tensor::zeros(xv.shape());
                gemm(MatRef::new(gy.data(), n, dout), MatRef::new(wv.data(), dout, din), dx.data_mut(), false);
                accumulate(nodes, grads, *x, dx);
            }
            if rg(nodes, *w) {
                let mut dw = Tensor::zeros(wv.shape());
                gemm(MatRef::t(gy.data(), n, dout), MatRef::new(xv.data(), n, din), dw.data_mut(), false);
                accumulate(nodes, grads, *w, dw);
            }
            if rg(nodes, *b) {
                let mut db = Tensor::zeros(&[dout]);
                for row in gy.data().chunks(dout) {
                    for (d, &g) in db.data_mut().iter_mut().zip(row) {
                        *d += g;
                    }
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::CrossEntropy { logits, labels } => {
            let lv = val(*logits);
            let (n, k) = (lv.shape()[0], lv.shape()[1]);
            let g = gy.item() / F::lit(n as f64);
            let mut d = Tensor::zeros(lv.shape());
            for (i, (row, &y)) in lv.data().chunks(k).zip(labels).enumerate() {
                let p = softmax_row(row);
                for (j, pj) in p.into_iter().enumerate() {
                    let target = if j == y { F::one() } else { F::zero() };
                    d.data_mut()[i * k + j] = g * (pj - target);
                }
            }
            accumulate(nodes, grads, *logits, d);
        }
    }
}

fn channel_sums<F: Real>(gy: &Tensor<F>, n: usize, c: usize, hw: usize) -> Tensor<F> {
    let mut db = Tensor::zeros(&[c]);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            db.data_mut()[ch] += gy.data()[off..off + hw].iter().copied().sum::<F>();
        }
    }
    db
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    bound: HashMap<ParamId, Var>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter; `None` if it was unused, frozen, or received
    /// no gradient.
    pub fn param(&self, p: &Param<F>) -> Option<&Tensor<F>> {
        self.bound.get(&p.id()).and_then(|&v| self.wrt(v))
    }
}
