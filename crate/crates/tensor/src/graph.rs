//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns
//! gradients for every node that depends on a differentiable leaf.

use std::collections::HashMap;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Rsqrt,
    Square,
    Abs,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
    Powf(f64),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Var, Unary),
    Scale(Var, T),
    Shift(Var),
    SumTo(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        pad: usize,
        cols: Vec<T>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    LogSoftmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, usize), Var>,
    frozen: Vec<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn unary_fwd<T: Real>(k: Unary, v: T) -> T {
    let one = T::one();
    match k {
        Unary::Neg => -v,
        Unary::Exp => v.exp(),
        Unary::Log => v.ln(),
        Unary::Sqrt => v.sqrt(),
        Unary::Rsqrt => one / v.sqrt(),
        Unary::Square => v * v,
        Unary::Abs => v.abs(),
        Unary::Tanh => v.tanh(),
        Unary::Sigmoid => one / (one + (-v).exp()),
        Unary::Softplus => {
            // log(1 + e^v) without overflow
            v.max(T::zero()) + (-v.abs()).exp().ln_1p()
        }
        Unary::LeakyRelu(s) => {
            if v >= T::zero() {
                v
            } else {
                T::lit(s) * v
            }
        }
        Unary::Powf(p) => v.powf(T::lit(p)),
    }
}

/// d out / d in, given input `x` and output `y`.
fn unary_deriv<T: Real>(k: Unary, x: T, y: T) -> T {
    let one = T::one();
    let half = T::lit(0.5);
    match k {
        Unary::Neg => -one,
        Unary::Exp => y,
        Unary::Log => one / x,
        Unary::Sqrt => half / y,
        Unary::Rsqrt => -half * y * y * y,
        Unary::Square => x + x,
        Unary::Abs => {
            if x > T::zero() {
                one
            } else if x < T::zero() {
                -one
            } else {
                T::zero()
            }
        }
        Unary::Tanh => one - y * y,
        Unary::Sigmoid => y * (one - y),
        Unary::Softplus => one / (one + (-x).exp()),
        Unary::LeakyRelu(s) => {
            if x >= T::zero() {
                one
            } else {
                T::lit(s)
            }
        }
        Unary::Powf(p) => T::lit(p) * x.powf(T::lit(p - 1.0)),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (e.g. a latent code being optimized).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Treat every parameter of `store` as a constant on this graph.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.push(store.uid());
    }

    /// Bind a stored parameter as a leaf; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let grad = !self.frozen.contains(&store.uid());
        let v = self.push(store.get(id).clone(), Op::Leaf, grad);
        self.bound.insert(key, v);
        v
    }

    /// The node bound to `id`, if the forward pass used it.
    pub fn bound_param(&self, store: &ParamStore<T>, id: ParamId) -> Option<Var> {
        self.bound.get(&(store.uid(), id.index())).copied()
    }

    /// Value copy with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = kernels::binary(self.value(a), self.value(b), f);
        let grad = self.needs(a) || self.needs(b);
        self.push(out, op(a, b), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    fn unary(&mut self, x: Var, k: Unary) -> Var {
        let out = self.value(x).map(|v| unary_fwd(k, v));
        let grad = self.needs(x);
        self.push(out, Op::Unary(x, k), grad)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn rsqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Rsqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Powf(p))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let grad = self.needs(x);
        self.push(out, Op::Scale(x, s), grad)
    }

    pub fn shift(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let grad = self.needs(x);
        self.push(out, Op::Shift(x), grad)
    }

    /// Sum over `axes`, keeping them as unit dims.
    pub fn sum_keepdim(&mut self, x: Var, axes: &[usize]) -> Var {
        let shape = kernels::keepdim_shape(self.shape(x), axes);
        let out = kernels::sum_to_shape(self.value(x), &shape);
        let grad = self.needs(x);
        self.push(out, Op::SumTo(x), grad)
    }

    pub fn mean_keepdim(&mut self, x: Var, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_keepdim(x, axes);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let grad = self.needs(x);
        self.push(out, Op::SumTo(x), grad)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let grad = self.needs(x);
        self.push(out, Op::Reshape(x), grad)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = kernels::permute(self.value(x), perm);
        let grad = self.needs(x);
        self.push(out, Op::Permute(x, perm.to_vec()), grad)
    }

    /// `op(a) · op(b)` for rank-2 operands, `op` optionally transposing.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul_values(self.value(a), ta, self.value(b), tb);
        let grad = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Stride-1 convolution, `x: [B,Ci,H,W]`, `w: [Co,Ci,K,K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let (out, cols) = kernels::conv2d(self.value(x), self.value(w), pad);
        let grad = self.needs(x) || self.needs(w);
        let cols = if self.needs(w) { cols } else { Vec::new() };
        self.push(out, Op::Conv2d { x, w, pad, cols }, grad)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = kernels::avg_pool2(self.value(x));
        let grad = self.needs(x);
        self.push(out, Op::AvgPool2(x), grad)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2(self.value(x));
        let grad = self.needs(x);
        self.push(out, Op::Upsample2(x), grad)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat(&values, axis);
        let grad = parts.iter().any(|&p| self.needs(p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            grad,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = kernels::narrow(self.value(x), axis, start, len);
        let grad = self.needs(x);
        self.push(out, Op::Narrow { x, axis, start }, grad)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = kernels::log_softmax(self.value(x));
        let grad = self.needs(x);
        self.push(out, Op::LogSoftmax(x), grad)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape().to_vec()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // intermediate gradients stay available for inspection
        Grads { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign_scaled(&t, T::one()),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc(a, kernels::sum_to_shape(g, self.shape(a)));
                }
                if self.needs(b) {
                    acc(b, kernels::sum_to_shape(g, self.shape(b)));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc(a, kernels::sum_to_shape(g, self.shape(a)));
                }
                if self.needs(b) {
                    acc(b, kernels::sum_to_shape(&g.map(|v| -v), self.shape(b)));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let t = kernels::binary(g, self.value(b), |x, y| x * y);
                    acc(a, kernels::sum_to_shape(&t, self.shape(a)));
                }
                if self.needs(b) {
                    let t = kernels::binary(g, self.value(a), |x, y| x * y);
                    acc(b, kernels::sum_to_shape(&t, self.shape(b)));
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let t = kernels::binary(g, self.value(b), |x, y| x / y);
                    acc(a, kernels::sum_to_shape(&t, self.shape(a)));
                }
                if self.needs(b) {
                    // d(a/b)/db = -out / b
                    let t = kernels::binary(g, &node.value, |x, y| x * y);
                    let t = kernels::binary(&t, self.value(b), |x, y| -x / y);
                    acc(b, kernels::sum_to_shape(&t, self.shape(b)));
                }
            }
            Op::Unary(x, k) => {
                let xv = self.value(*x);
                let mut out = g.clone();
                for ((o, &xi), &yi) in out
                    .data_mut()
                    .iter_mut()
                    .zip(xv.data())
                    .zip(node.value.data())
                {
                    *o *= unary_deriv(*k, xi, yi);
                }
                acc(*x, out);
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(*x, g.map(|v| v * s));
            }
            Op::Shift(x) => acc(*x, g.clone()),
            Op::SumTo(x) => acc(*x, kernels::expand(g, self.shape(*x))),
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x).to_vec())),
            Op::Permute(x, perm) => {
                acc(*x, kernels::permute(g, &kernels::inverse_permutation(perm)));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let ga = if ta {
                        matmul_values(bv, tb, g, true)
                    } else {
                        matmul_values(g, false, bv, !tb)
                    };
                    acc(a, ga);
                }
                if self.needs(b) {
                    let gb = if tb {
                        matmul_values(g, true, av, ta)
                    } else {
                        matmul_values(av, !ta, g, false)
                    };
                    acc(b, gb);
                }
            }
            Op::Conv2d { x, w, pad, cols } => {
                let (x, w) = (*x, *w);
                let (gx, gw) = kernels::conv2d_backward(
                    g,
                    self.shape(x),
                    self.value(w),
                    cols,
                    *pad,
                    self.needs(x),
                    self.needs(w),
                );
                if let Some(gx) = gx {
                    acc(x, gx);
                }
                if let Some(gw) = gw {
                    acc(w, gw);
                }
            }
            Op::AvgPool2(x) => acc(*x, kernels::avg_pool2_backward(g)),
            Op::Upsample2(x) => acc(*x, kernels::upsample2_backward(g)),
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        acc(p, kernels::narrow(g, *axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                acc(
                    *x,
                    kernels::narrow_backward(g, self.shape(*x), *axis, *start),
                );
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut out = g.clone();
                for (orow, yrow) in out
                    .data_mut()
                    .chunks_mut(n)
                    .zip(node.value.data().chunks(n))
                {
                    let gsum: T = orow.iter().copied().sum();
                    for (o, &y) in orow.iter_mut().zip(yrow) {
                        *o -= y.exp() * gsum;
                    }
                }
                acc(*x, out);
            }
        }
    }
}

fn matmul_values<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let am = MatRef::new(a.data(), ar, ac);
    let bm = MatRef::new(b.data(), br, bc);
    let am = if ta { am.t() } else { am };
    let bm = if tb { bm.t() } else { bm };
    let m = if ta { ac } else { ar };
    let n = if tb { br } else { bc };
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), am, bm, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}
