//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation applied to its variables. Parameter
//! tensors enter the tape by reference (no copy); intermediate values are
//! owned. Calling [`Graph::backward`] on a scalar variable walks the tape in
//! reverse and returns gradients for every node that depends on a
//! gradient-requiring leaf.

use std::borrow::Cow;
use std::sync::Arc;

use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a cubic-kernel 3D convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        [f(self.in_dims[0]), f(self.in_dims[1]), f(self.in_dims[2])]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn out_voxels(&self) -> usize {
        self.out_dims().iter().product()
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Reshape(Var),
    Gather { x: Var, index: Arc<Vec<usize>> },
    Concat(Vec<Var>),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv3d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    SoftmaxRows(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
}

pub struct Graph<'a, T: Scalar> {
    values: Vec<Cow<'a, Tensor<T>>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
}

/// Parameter tensors of one [`Params`] collection bound into a graph.
pub struct Bound<'a, T: Scalar> {
    params: &'a Params<T>,
    vars: Vec<Var>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn var(&self, name: &str) -> Var {
        match self.params.index_of(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter `{name}` is not part of this collection"),
        }
    }

    pub fn params(&self) -> &'a Params<T> {
        self.params
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients aligned with the bound parameter collection; unused
    /// parameters receive zeros.
    pub fn for_params(&self, bound: &Bound<'_, T>) -> Params<T> {
        bound.params.map_indexed(|i, p| match self.grads[bound.vars[i].0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(p.shape()),
        })
    }
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(GELU_K) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::c(3.0 * GELU_K) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims();
    let k = g.kernel;
    let p = od * oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let pad = g.pad as isize;
    let s = g.stride as isize;
    for c in 0..g.in_channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - pad;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = (iz as usize * h + iy as usize) * w;
                            let dst_row = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_row + ox] = xc[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims();
    let k = g.kernel;
    let p = od * oh * ow;
    let pad = g.pad as isize;
    let s = g.stride as isize;
    for c in 0..g.in_channels {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - pad;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = (iz as usize * h + iy as usize) * w;
                            let src_row = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    xc[dst_row + ix as usize] += src[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let ng = parents.iter().any(|p| self.needs_grad[p.0]);
        self.push(Cow::Owned(value), op, ng)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Owned leaf that does receive a gradient (used by input-sensitivity probes).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Borrowed leaf, optionally differentiable.
    pub fn borrowed(&mut self, value: &'a Tensor<T>, trainable: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, trainable)
    }

    pub fn bind(&mut self, params: &'a Params<T>) -> Bound<'a, T> {
        self.bind_with(params, true)
    }

    /// Binds without requesting gradients (frozen collections).
    pub fn bind_frozen(&mut self, params: &'a Params<T>) -> Bound<'a, T> {
        self.bind_with(params, false)
    }

    fn bind_with(&mut self, params: &'a Params<T>, trainable: bool) -> Bound<'a, T> {
        let vars = params.tensors().map(|t| self.borrowed(t, trainable)).collect();
        Bound { params, vars }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        self.push_owned(out, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out = self.value(a).zip_map(self.value(b), f).expect("checked shapes");
        self.push_owned(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        self.push_owned(out, Op::Reshape(x), &[x])
    }

    /// `out[i] = x[index[i]]`, output reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data).expect("gather output shape");
        self.push_owned(out, Op::Gather { x, index }, &[x])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing shape mismatch");
            lead += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        self.push_owned(out, Op::Concat(parts.to_vec()), parts)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D");
        let (m, k) = (sa[0], sa[1]);
        let sb = self.shape(b);
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D");
        let n = if trans_b {
            assert_eq!(sb[1], k, "matmul inner dim mismatch");
            sb[0]
        } else {
            assert_eq!(sb[0], k, "matmul inner dim mismatch");
            sb[1]
        };
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        T::gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), rsb, csb, T::zero(), &mut out);
        let out = Tensor::from_vec(&[m, n], out).expect("matmul shape");
        self.push_owned(out, Op::MatMul { a, b, m, k, n, trans_b }, &[a, b])
    }

    /// `a [m,k] * b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] * b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// Adds `bias [E]` to every row of `x [.., E]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let e = *self.shape(x).last().expect("non-empty shape");
        assert_eq!(self.value(bias).len(), e, "row bias length");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(e) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push_owned(out, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Adds `bias [C]` to channel `c` of `x [C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(bias).len(), c, "channel bias length");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        let per = out.len() / c;
        for (chunk, &bb) in out.data_mut().chunks_mut(per).zip(&b) {
            for v in chunk {
                *v += bb;
            }
        }
        self.push_owned(out, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// 3D convolution of `x [Ci, D, H, W]` with `w [Co, Ci, k, k, k]` (no bias).
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 4, "conv3d input must be [C, D, H, W]");
        let sw = self.shape(w);
        assert_eq!(sw.len(), 5, "conv3d weight must be [Co, Ci, k, k, k]");
        assert_eq!(sw[1], sx[0], "conv3d channel mismatch");
        let geom = ConvGeom {
            in_channels: sx[0],
            out_channels: sw[0],
            in_dims: [sx[1], sx[2], sx[3]],
            kernel: sw[2],
            stride,
            pad,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.out_voxels();
        let kl = geom.patch_len();
        let mut out = vec![T::zero(); geom.out_channels * p];
        T::gemm(geom.out_channels, kl, p, self.value(w).data(), kl, 1, &cols, p, 1, T::zero(), &mut out);
        let [od, oh, ow] = geom.out_dims();
        let out = Tensor::from_vec(&[geom.out_channels, od, oh, ow], out).expect("conv shape");
        let keep = if self.needs_grad[w.0] { cols } else { Vec::new() };
        self.push_owned(out, Op::Conv3d { x, w, geom, cols: keep }, &[x, w])
    }

    /// Row-wise layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let e = *self.shape(x).last().expect("non-empty shape");
        let eps = T::c(1e-5);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xs = self.value(x);
        let rows = xs.len() / e;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        let en = T::c(e as f64);
        for row in xs.data().chunks(e) {
            let mean = row.iter().copied().sum::<T>() / en;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / en;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::from_vec(xs.shape(), out).expect("layer norm shape");
        self.push_owned(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let e = *self.shape(x).last().expect("non-empty shape");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(e) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push_owned(out, Op::SoftmaxRows(x), &[x])
    }

    /// Mean over rows of `x [N, E]` giving `[E]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let (n, e) = (s[0], s[1]);
        let mut out = vec![T::zero(); e];
        for row in self.value(x).data().chunks(e) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::c(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_vec(&[e], out).expect("mean rows");
        self.push_owned(out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push_owned(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits).data();
        assert!(target < l.len(), "target class out of range");
        let mx = l.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = l.iter().map(|&v| (v - mx).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / z).collect();
        let loss = -(l[target] - mx - z.ln());
        self.push_owned(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, &[logits])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn propagate(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.values[idx];
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let g = dy.zip_map(self.value(*b), |d, v| d * v).expect("shape");
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = dy.zip_map(self.value(*a), |d, v| d * v).expect("shape");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.accumulate(grads, *x, dy.map(|d| d * k));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, dy.clone()),
            Op::Square(x) => {
                let g = dy.zip_map(self.value(*x), |d, v| d * (v + v)).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => {
                let g = dy.zip_map(y, |d, e| d * e).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = dy.zip_map(y, |d, s| d * s * (T::one() - s)).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::Silu(x) => {
                let g = dy.zip_map(self.value(*x), |d, v| d * silu_grad(v)).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::Gelu(x) => {
                let g = dy.zip_map(self.value(*x), |d, v| d * gelu_grad(v)).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => {
                let g = dy.clone().reshape(self.shape(*x)).expect("reshape back");
                self.accumulate(grads, *x, g);
            }
            Op::Gather { x, index } => {
                if self.wants(*x) {
                    let mut g = Tensor::zeros(self.shape(*x));
                    let gd = g.data_mut();
                    for (&i, &d) in index.iter().zip(dy.data()) {
                        gd[i] += d;
                    }
                    self.accumulate(grads, *x, g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let g = Tensor::from_vec(self.shape(p), dy.data()[off..off + n].to_vec())
                            .expect("concat part");
                        self.accumulate(grads, p, g);
                    }
                    off += n;
                }
            }
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                    T::gemm(m, n, k, dy.data(), n, 1, self.value(*b).data(), rs, cs, T::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da).expect("da"));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    if *trans_b {
                        let mut db = vec![T::zero(); n * k];
                        T::gemm(n, m, k, dy.data(), 1, n, av, k, 1, T::zero(), &mut db);
                        self.accumulate(grads, *b, Tensor::from_vec(&[n, k], db).expect("db"));
                    } else {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, av, 1, k, dy.data(), n, 1, T::zero(), &mut db);
                        self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db).expect("db"));
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*bias) {
                    let e = self.value(*bias).len();
                    let mut g = vec![T::zero(); e];
                    for row in dy.data().chunks(e) {
                        for (o, &d) in g.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(self.shape(*bias), g).expect("bias"));
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let per = dy.len() / c;
                    let g: Vec<T> = dy.data().chunks(per).map(|ch| ch.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::from_vec(self.shape(*bias), g).expect("bias"));
                }
            }
            Op::Conv3d { x, w, geom, cols } => {
                let p = geom.out_voxels();
                let kl = geom.patch_len();
                let co = geom.out_channels;
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); co * kl];
                    T::gemm(co, p, kl, dy.data(), p, 1, cols, 1, p, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw).expect("dw"));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); kl * p];
                    T::gemm(kl, co, p, self.value(*w).data(), 1, kl, dy.data(), p, 1, T::zero(), &mut dcols);
                    let mut dx = Tensor::zeros(self.shape(*x));
                    col2im(&dcols, geom, dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let e = self.value(*gamma).len();
                let g = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); e];
                    let mut db = vec![T::zero(); e];
                    for (row, xr) in dy.data().chunks(e).zip(xhat.chunks(e)) {
                        for j in 0..e {
                            dg[j] += row[j] * xr[j];
                            db[j] += row[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dg).expect("dg"));
                    self.accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), db).expect("db"));
                }
                if self.wants(*x) {
                    let en = T::c(e as f64);
                    let mut dx = Vec::with_capacity(dy.len());
                    for ((row, xr), &is) in dy.data().chunks(e).zip(xhat.chunks(e)).zip(inv_std) {
                        let dxh: Vec<T> = row.iter().zip(g).map(|(&d, &gg)| d * gg).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        for j in 0..e {
                            dx.push(is / en * (en * dxh[j] - s1 - xr[j] * s2));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).expect("dx"));
                }
            }
            Op::SoftmaxRows(x) => {
                let e = *y.shape().last().expect("shape");
                let mut dx = Vec::with_capacity(dy.len());
                for (dr, yr) in dy.data().chunks(e).zip(y.data().chunks(e)) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(dr.iter().zip(yr).map(|(&d, &s)| s * (d - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).expect("softmax"));
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x)[0];
                let inv = T::one() / T::c(n as f64);
                let mut dx = Vec::with_capacity(n * dy.len());
                for _ in 0..n {
                    dx.extend(dy.data().iter().map(|&d| d * inv));
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).expect("mean rows"));
            }
            Op::Sum(x) => {
                let d = dy.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), d));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = dy.item() / T::c(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), d));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let d = dy.item();
                let g: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| d * (if i == *target { p - T::one() } else { p }))
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_vec(self.shape(*logits), g).expect("ce"));
            }
        }
    }
}

/// Flat indices for nearest-neighbour resizing of `[C, D, H, W]` data.
pub fn nearest_resize_index(channels: usize, from: [usize; 3], to: [usize; 3]) -> Vec<usize> {
    let map = |o: usize, n_out: usize, n_in: usize| (o * n_in) / n_out;
    let mut idx = Vec::with_capacity(channels * to.iter().product::<usize>());
    for c in 0..channels {
        for z in 0..to[0] {
            let iz = map(z, to[0], from[0]);
            for y in 0..to[1] {
                let iy = map(y, to[1], from[1]);
                for x in 0..to[2] {
                    let ix = map(x, to[2], from[2]);
                    idx.push(((c * from[0] + iz) * from[1] + iy) * from[2] + ix);
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        // 1 in-channel 3x3x3 input, single 3x3x3 all-ones kernel, pad 1
        let x: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let mut g = Graph::new();
        let xv = g.constant(t(&[1, 3, 3, 3], &x));
        let wv = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let y = g.conv3d(xv, wv, 1, 1);
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        // centre output sees every voxel
        assert_eq!(g.value(y).data()[13], (0..27).sum::<usize>() as f64);
        // corner sees a 2x2x2 block
        let corner: f64 = [0, 1, 3, 4, 9, 10, 12, 13].iter().map(|&i| i as f64).sum();
        assert_eq!(g.value(y).data()[0], corner);
    }

    #[test]
    fn strided_conv_output_dims() {
        let geom = ConvGeom { in_channels: 1, out_channels: 1, in_dims: [24, 28, 24], kernel: 3, stride: 2, pad: 1 };
        assert_eq!(geom.out_dims(), [12, 14, 12]);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 100.0]));
        let s = g.softmax_rows(x);
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_resize_identity() {
        let idx = nearest_resize_index(2, [2, 3, 4], [2, 3, 4]);
        assert_eq!(idx, (0..48).collect::<Vec<_>>());
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut g = Graph::new();
        let l = g.input(t(&[2], &[0.0, 0.0]));
        let ce = g.cross_entropy(l, 1);
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
        let gr = g.backward(ce);
        assert_eq!(gr.get(l).unwrap().data(), &[0.5, -0.5]);
    }
}
