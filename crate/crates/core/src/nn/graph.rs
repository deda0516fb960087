//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation in execution order; node indices are
//! therefore a valid topological order and `backward` simply walks the tape
//! in reverse. Parameters are pulled in lazily from a borrowed
//! [`ParamStore`]; those marked frozen never receive gradients, and neither
//! does any node whose inputs are all gradient-free.

use super::kernels::{col2im, gemm, im2col, transpose, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Tanh,
    Abs,
}

/// How the row spread is turned into a divisor when standardizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spread {
    /// `1/√(var+eps)`, as in layer normalization.
    RootVarEps,
    /// `1/(σ+eps)`, as in subject bias modulation.
    StdPlusEps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    L2,
    SqL2,
    Mse,
    Bce,
    Cosine,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddChannel(Var, Var),
    MulGate(Var, Var),
    Unary(Var, Unary),
    Softmax(Var),
    Standardize { x: Var, spread: Spread, stats: Vec<T> },
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    MeanAxis(Var, usize),
    Bmm { a: Var, b: Var, tb: bool },
    SumAll(Var),
    WeightedSum(Vec<(Var, T)>),
    Loss { a: Var, b: Var, kind: LossKind, saved: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a tape node, if it received one.
    pub fn of(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient with respect to a parameter used in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.param_vars.get(id.0).copied().flatten().and_then(|v| self.of(v))
    }

    /// Parameters that received a gradient, in id order.
    pub fn params(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.of(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

/// A tape of differentiable operations.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    trainable: Option<Vec<bool>>,
}

impl<T: Real> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<'static, T> {
    /// A graph with no parameter store; only [`Graph::input`] leaves are available.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            trainable: None,
        }
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let w = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / w.max(1), w)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn unary_fwd<T: Real>(kind: Unary, x: T) -> T {
    let one = T::one();
    match kind {
        Unary::Silu => x / (one + (-x).exp()),
        Unary::Gelu => {
            let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let inner = c * (x + T::lit(0.044715) * x * x * x);
            T::lit(0.5) * x * (one + inner.tanh())
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Abs => x.abs(),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn unary_grad<T: Real>(kind: Unary, x: T, y: T) -> T {
    let one = T::one();
    match kind {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (one + x * (one - s))
        }
        Unary::Gelu => {
            let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let k = T::lit(0.044715);
            let t = (c * (x + k * x * x * x)).tanh();
            T::lit(0.5) * (one + t)
                + T::lit(0.5) * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x)
        }
        Unary::Sigmoid => y * (one - y),
        Unary::Tanh => one - y * y,
        Unary::Abs => {
            if x > T::zero() {
                one
            } else if x < T::zero() {
                -one
            } else {
                T::zero()
            }
        }
    }
}

const BCE_EPS: f64 = 1e-7;
const COS_EPS: f64 = 1e-12;

impl<'s, T: Real> Graph<'s, T> {
    /// A graph that reads parameters from `store`; all parameters are trainable.
    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            trainable: None,
        }
    }

    /// Restricts gradient computation to parameters for which `keep` is true.
    pub fn train_only(mut self, mut keep: impl FnMut(ParamId, &str) -> bool) -> Self {
        let store = self.store.expect("train_only needs a parameter store");
        self.trainable = Some(store.iter().map(|(id, n, _)| keep(id, n)).collect());
        self
    }

    /// Freezes every parameter.
    pub fn frozen(self) -> Self {
        self.train_only(|_, _| false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!("non-finite output in {what}")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "input")
    }

    /// Leaf that receives a gradient (e.g. voxels for saliency).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let trainable = self.trainable.as_ref().is_none_or(|t| t[id.0]);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let v = self.value(x);
        let data = v.data().iter().map(|&e| s * e + c).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::Affine(x, s), ng, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    fn row_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let (_, w) = rows_of(self.shape(x));
        if self.shape(v) != [w] {
            return dim_err(format!(
                "row broadcast: {:?} against {:?}",
                self.shape(v),
                self.shape(x)
            ));
        }
        let vx = self.value(x);
        let vv = self.value(v).data();
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            for (e, &b) in row.iter_mut().zip(vv) {
                *e = if mul { *e * b } else { *e + b };
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(&[x, v]);
        let op = if mul { Op::MulRow(x, v) } else { Op::AddRow(x, v) };
        self.push(t, op, ng, "row broadcast")
    }

    /// `x[..., n] + v[n]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, false)
    }

    /// `x[..., n] ⊙ v[n]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, true)
    }

    /// `x[B,C,H,W] + v[B,C]` broadcast over space.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(v) != [s[0], s[1]] {
            return dim_err(format!("add_channel: {:?} with {:?}", s, self.shape(v)));
        }
        let hw = s[2] * s[3];
        let vv = self.value(v).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (plane, &b) in data.chunks_exact_mut(hw).zip(&vv) {
            for e in plane {
                *e = *e + b;
            }
        }
        let t = Tensor::new(s, data)?;
        let ng = self.ng(&[x, v]);
        self.push(t, Op::AddChannel(x, v), ng, "add_channel")
    }

    /// `x[B,C,H,W] ⊙ g[B,1,H,W]` broadcast over channels.
    pub fn mul_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gate) != [s[0], 1, s[2], s[3]] {
            return dim_err(format!("mul_gate: {:?} with {:?}", s, self.shape(gate)));
        }
        let hw = s[2] * s[3];
        let gv = self.value(gate).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (bi, sample) in data.chunks_exact_mut(s[1] * hw).enumerate() {
            let gp = &gv[bi * hw..(bi + 1) * hw];
            for plane in sample.chunks_exact_mut(hw) {
                for (e, &g) in plane.iter_mut().zip(gp) {
                    *e = *e * g;
                }
            }
        }
        let t = Tensor::new(s, data)?;
        let ng = self.ng(&[x, gate]);
        self.push(t, Op::MulGate(x, gate), ng, "mul_gate")
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| unary_fwd(kind, e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::Unary(x, kind), ng, "activation")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (_, w) = rows_of(v.shape());
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s = s + *e;
            }
            for e in row.iter_mut() {
                *e = *e / s;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::Softmax(x), ng, "softmax")
    }

    /// Per-row standardization over the last axis, without affine.
    pub fn standardize(&mut self, x: Var, eps: f64, spread: Spread) -> Result<Var> {
        let v = self.value(x);
        let (_, w) = rows_of(v.shape());
        if w < 2 {
            return dim_err("standardize needs at least 2 features");
        }
        let eps = T::lit(eps);
        let n = T::lit(w as f64);
        let mut data = v.data().to_vec();
        let mut stats = Vec::new();
        for row in data.chunks_exact_mut(w) {
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let std = var.sqrt();
            let inv = match spread {
                Spread::RootVarEps => T::one() / (var + eps).sqrt(),
                Spread::StdPlusEps => T::one() / (std + eps),
            };
            for e in row.iter_mut() {
                *e = (*e - mean) * inv;
            }
            stats.extend_from_slice(&[mean, inv, std]);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::Standardize { x, spread, stats }, ng, "standardize")
    }

    /// `y = x·Wᵀ + b` over the last axis of `x`; `W` is `[out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return dim_err(format!("dense weight must be 2-D, got {ws:?}"));
        }
        let (out, inp) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        let (n, win) = rows_of(&xs);
        if win != inp {
            return dim_err(format!("dense: input width {win} but weight expects {inp}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return dim_err(format!("dense bias {:?} for {out} outputs", self.shape(b)));
            }
        }
        let wt = transpose(out, inp, self.value(w).data());
        let mut y = vec![T::zero(); n * out];
        gemm(n, inp, out, self.value(x).data(), &wt, &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                add_into(row, bv);
            }
        }
        let mut ys = xs;
        *ys.last_mut().unwrap() = out;
        let t = Tensor::new(ys, y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::Dense { x, w, b }, ng, "dense")
    }

    fn conv_geom(&self, x: Var, k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let s = self.shape(x);
        if s.len() != 4 {
            return dim_err(format!("conv input must be [B,C,H,W], got {s:?}"));
        }
        ConvGeom::new(s[1], s[2], s[3], k, stride, pad)
            .ok_or_else(|| Error::Dimension(format!("conv: kernel {k} does not fit input {s:?}")))
    }

    /// Cross-correlation; `w` is `[out_ch, in_ch, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return dim_err(format!("conv kernel must be [O,C,k,k], got {ws:?}"));
        }
        let g = self.conv_geom(x, ws[2], stride, pad)?;
        if ws[1] != g.channels {
            return dim_err(format!("conv: kernel wants {} channels, input has {}", ws[1], g.channels));
        }
        let o = ws[0];
        let batch = self.shape(x)[0];
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); batch * o * cols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let in_len = g.channels * g.h * g.w;
        for bi in 0..batch {
            let c = im2col(&xv[bi * in_len..(bi + 1) * in_len], &g);
            gemm(o, rows, cols, wv, &c, &mut out[bi * o * cols..(bi + 1) * o * cols]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return dim_err("conv bias length");
            }
            for (pi, plane) in out.chunks_exact_mut(cols).enumerate() {
                let bb = bv[pi % o];
                for e in plane {
                    *e = *e + bb;
                }
            }
        }
        let t = Tensor::new(vec![batch, o, g.oh, g.ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::Conv { x, w, b, stride, pad }, ng, "conv2d")
    }

    /// Transposed convolution; `w` is `[in_ch, out_ch, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] || xs.len() != 4 || ws[0] != xs[1] {
            return dim_err(format!("conv_transpose: kernel {ws:?} vs input {xs:?}"));
        }
        let (cin, cout, k) = (ws[0], ws[1], ws[2]);
        let full_h = (xs[2] - 1) * stride + k;
        let full_w = (xs[3] - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return dim_err("conv_transpose: padding too large");
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let g = ConvGeom::new(cout, oh, ow, k, stride, pad)
            .filter(|g| g.oh == xs[2] && g.ow == xs[3])
            .ok_or_else(|| Error::Dimension("conv_transpose geometry".into()))?;
        let batch = xs[0];
        let hw = xs[2] * xs[3];
        let rows = cout * k * k;
        let wt = transpose(cin, rows, self.value(w).data());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); batch * cout * oh * ow];
        for bi in 0..batch {
            let mut cols = vec![T::zero(); rows * hw];
            gemm(rows, cin, hw, &wt, &xv[bi * cin * hw..(bi + 1) * cin * hw], &mut cols);
            col2im(&cols, &g, &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != cout {
                return dim_err("conv_transpose bias length");
            }
            for (pi, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
                let bb = bv[pi % cout];
                for e in plane {
                    *e = *e + bb;
                }
            }
        }
        let t = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::ConvT { x, w, b, stride, pad }, ng, "conv_transpose2d")
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return dim_err(format!("avg_pool2d({k}) on {s:?}"));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let xv = self.value(x).data();
        let inv = T::lit(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for p in 0..s[0] * s[1] {
            let src = &xv[p * s[2] * s[3]..];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc = acc + src[(oy * k + dy) * s[3] + ox * k + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::AvgPool(x, k), ng, "avg_pool2d")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for {s:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(self.value(x).data(), &s, perm);
        let t = Tensor::new(out_shape, data)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::Permute(x, perm.to_vec()), ng, "permute")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return dim_err("concat axis out of range");
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return dim_err(format!("concat: {:?} vs {:?}", s, first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(parts);
        self.push(t, Op::Concat(parts.to_vec(), axis), ng, "concat")
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return dim_err(format!("slice {start}+{len} on axis {axis} of {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::Slice { x, axis, start }, ng, "slice")
    }

    /// Mean over one axis, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return dim_err("mean_axis out of range");
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let inv = T::lit(1.0 / n as f64);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..n {
                add_into(dst, &xv[(o * n + a) * inner..(o * n + a + 1) * inner]);
            }
            for e in dst {
                *e = *e * inv;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        self.push(t, Op::MeanAxis(x, axis), ng, "mean_axis")
    }

    /// Batched matmul `a[B,M,K] · b[B,K,N]`, or `a · bᵀ` with `b[B,N,K]` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err(format!("bmm: {sa:?} x {sb:?}"));
        }
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err(format!("bmm inner dims: {sa:?} x {sb:?} (tb={tb})"));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); bn * m * n];
        for i in 0..bn {
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let bmat = if tb { transpose(n, k, bi) } else { bi.to_vec() };
            gemm(m, k, n, &av[i * m * k..(i + 1) * m * k], &bmat, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let t = Tensor::new(vec![bn, m, n], out)?;
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Bmm { a, b, tb }, ng, "bmm")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng, "sum_all")
    }

    /// `Σ wᵢ·xᵢ` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Dimension("weighted_sum of nothing".into()))?
            .0;
        let shape = self.shape(first).to_vec();
        let mut data = vec![T::zero(); self.value(first).numel()];
        let mut list = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return dim_err("weighted_sum shape mismatch");
            }
            let w = T::lit(w);
            for (d, &e) in data.iter_mut().zip(self.value(v).data()) {
                *d = *d + w * e;
            }
            list.push((v, w));
        }
        let t = Tensor::new(shape, data)?;
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&deps);
        self.push(t, Op::WeightedSum(list), ng, "weighted_sum")
    }

    fn loss(&mut self, a: Var, b: Var, kind: LossKind) -> Result<Var> {
        self.same_shape(a, b, "loss")?;
        let sa = self.shape(a).to_vec();
        let rows = sa[0];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let width = va.len() / rows;
        let mut saved = Vec::new();
        let value = match kind {
            LossKind::L2 | LossKind::SqL2 => {
                let mut acc = T::zero();
                for r in 0..rows {
                    let ss = va[r * width..(r + 1) * width]
                        .iter()
                        .zip(&vb[r * width..(r + 1) * width])
                        .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
                    let term = if kind == LossKind::L2 { ss.sqrt() } else { ss };
                    saved.push(term);
                    acc = acc + term;
                }
                acc / T::lit(rows as f64)
            }
            LossKind::Mse => {
                let ss = va.iter().zip(vb).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
                ss / T::lit(va.len() as f64)
            }
            LossKind::Bce => {
                let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
                let mut acc = T::zero();
                for (&p, &t) in va.iter().zip(vb) {
                    let p = p.max(lo).min(hi);
                    acc = acc - (t * p.ln() + (T::one() - t) * (T::one() - p).ln());
                }
                acc / T::lit(va.len() as f64)
            }
            LossKind::Cosine => {
                let mut acc = T::zero();
                for r in 0..rows {
                    let ra = &va[r * width..(r + 1) * width];
                    let rb = &vb[r * width..(r + 1) * width];
                    let na = ra.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
                    let nb = rb.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
                    if na < T::lit(COS_EPS) || nb < T::lit(COS_EPS) {
                        return Err(Error::Numerical(format!(
                            "cosine of a near-zero vector (row {r})"
                        )));
                    }
                    let dot = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
                    let cos = dot / (na * nb);
                    saved.extend_from_slice(&[na, nb, cos]);
                    acc = acc + (T::one() - cos);
                }
                acc / T::lit(rows as f64)
            }
        };
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar(value), Op::Loss { a, b, kind, saved }, ng, "loss")
    }

    /// Mean over rows of the Euclidean distance `‖a_r − b_r‖₂`.
    pub fn l2_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.loss(a, b, LossKind::L2)
    }

    /// Mean over rows of `‖a_r − b_r‖₂²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.loss(a, b, LossKind::SqL2)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.loss(a, b, LossKind::Mse)
    }

    /// Binary cross-entropy averaged over elements; `pred` clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss(pred, target, LossKind::Bce)
    }

    /// Mean over rows of `1 − cos(a_r, b_r)`.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.loss(a, b, LossKind::Cosine)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return dim_err("backward needs a scalar root");
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !gy.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at node {i}")));
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            param_vars: self.param_vars.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.to_vec());
                self.acc(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.to_vec());
                if self.wants(*b) {
                    self.acc(grads, *b, gy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.acc(grads, *a, gy.iter().zip(vb).map(|(&g, &v)| g * v).collect());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gy.iter().zip(va).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Affine(x, s) => self.acc(grads, *x, gy.iter().map(|&g| g * *s).collect()),
            Op::AddRow(x, v) | Op::MulRow(x, v) => {
                let mul = matches!(node.op, Op::MulRow(..));
                let vv = self.value(*v).data();
                let w = vv.len();
                if self.wants(*x) {
                    let gx = if mul {
                        gy.chunks_exact(w)
                            .flat_map(|r| r.iter().zip(vv).map(|(&g, &b)| g * b))
                            .collect()
                    } else {
                        gy.to_vec()
                    };
                    self.acc(grads, *x, gx);
                }
                if self.wants(*v) {
                    let xv = self.value(*x).data();
                    let mut gv = vec![T::zero(); w];
                    for (r, grow) in gy.chunks_exact(w).enumerate() {
                        for j in 0..w {
                            gv[j] = gv[j] + if mul { grow[j] * xv[r * w + j] } else { grow[j] };
                        }
                    }
                    self.acc(grads, *v, gv);
                }
            }
            Op::AddChannel(x, v) => {
                self.acc(grads, *x, gy.to_vec());
                if self.wants(*v) {
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    let gv = gy
                        .chunks_exact(hw)
                        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b))
                        .collect();
                    self.acc(grads, *v, gv);
                }
            }
            Op::MulGate(x, gate) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                if self.wants(*x) {
                    let mut gx = gy.to_vec();
                    for (bi, sample) in gx.chunks_exact_mut(s[1] * hw).enumerate() {
                        let gp = &gv[bi * hw..(bi + 1) * hw];
                        for plane in sample.chunks_exact_mut(hw) {
                            for (e, &g) in plane.iter_mut().zip(gp) {
                                *e = *e * g;
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.wants(*gate) {
                    let mut gg = vec![T::zero(); s[0] * hw];
                    for bi in 0..s[0] {
                        for c in 0..s[1] {
                            let off = (bi * s[1] + c) * hw;
                            for p in 0..hw {
                                gg[bi * hw + p] = gg[bi * hw + p] + gy[off + p] * xv[off + p];
                            }
                        }
                    }
                    self.acc(grads, *gate, gg);
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let gx = gy
                    .iter()
                    .zip(xv)
                    .zip(y)
                    .map(|((&g, &xe), &ye)| g * unary_grad(*kind, xe, ye))
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let (_, w) = rows_of(node.value.shape());
                let mut gx = Vec::with_capacity(gy.len());
                for (gr, yr) in gy.chunks_exact(w).zip(y.chunks_exact(w)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &v)| a + g * v);
                    gx.extend(gr.iter().zip(yr).map(|(&g, &v)| v * (g - dot)));
                }
                self.acc(grads, *x, gx);
            }
            Op::Standardize { x, spread, stats } => {
                let (_, w) = rows_of(node.value.shape());
                let nf = T::lit(w as f64);
                let xv = self.value(*x).data();
                let mut gx = Vec::with_capacity(gy.len());
                for (r, gr) in gy.chunks_exact(w).enumerate() {
                    let (mean, inv, std) = (stats[3 * r], stats[3 * r + 1], stats[3 * r + 2]);
                    let xr = &xv[r * w..(r + 1) * w];
                    let gmean = gr.iter().fold(T::zero(), |a, &b| a + b) / nf;
                    let proj = gr
                        .iter()
                        .zip(xr)
                        .fold(T::zero(), |a, (&g, &xe)| a + g * (xe - mean));
                    // d inv / d var
                    let dinv = match spread {
                        Spread::RootVarEps => -T::lit(0.5) * inv * inv * inv,
                        Spread::StdPlusEps => {
                            if std > T::zero() {
                                -inv * inv / (T::lit(2.0) * std)
                            } else {
                                T::zero()
                            }
                        }
                    };
                    let k = dinv * T::lit(2.0) / nf * proj;
                    gx.extend(
                        gr.iter()
                            .zip(xr)
                            .map(|(&g, &xe)| inv * (g - gmean) + k * (xe - mean)),
                    );
                }
                self.acc(grads, *x, gx);
            }
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (out, inp) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let nrows = xv.len() / inp;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); nrows * inp];
                    gemm(nrows, out, inp, gy, self.value(*w).data(), &mut gx);
                    self.acc(grads, *x, gx);
                }
                if self.wants(*w) {
                    let gyt = transpose(nrows, out, gy);
                    let mut gw = vec![T::zero(); out * inp];
                    gemm(out, nrows, inp, &gyt, xv, &mut gw);
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); out];
                        for r in gy.chunks_exact(out) {
                            add_into(&mut gb, r);
                        }
                        self.acc(grads, *b, gb);
                    }
                }
            }
            Op::Conv { x, w, b, stride, pad } => {
                let ws = self.shape(*w).to_vec();
                let g = self.conv_geom(*x, ws[2], *stride, *pad)?;
                let o = ws[0];
                let (rows, cols) = (g.col_rows(), g.col_cols());
                let xs = self.shape(*x);
                let batch = xs[0];
                let in_len = g.channels * g.h * g.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let wt = if want_x { transpose(o, rows, wv) } else { Vec::new() };
                let mut gx = if want_x { vec![T::zero(); batch * in_len] } else { Vec::new() };
                let mut gw = if want_w { vec![T::zero(); o * rows] } else { Vec::new() };
                for bi in 0..batch {
                    let gyb = &gy[bi * o * cols..(bi + 1) * o * cols];
                    if want_w {
                        let c = im2col(&xv[bi * in_len..(bi + 1) * in_len], &g);
                        let ct = transpose(rows, cols, &c);
                        gemm(o, cols, rows, gyb, &ct, &mut gw);
                    }
                    if want_x {
                        let mut dc = vec![T::zero(); rows * cols];
                        gemm(rows, o, cols, &wt, gyb, &mut dc);
                        col2im(&dc, &g, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if want_x {
                    self.acc(grads, *x, gx);
                }
                if want_w {
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.acc(grads, *b, channel_sums(gy, o, cols));
                    }
                }
            }
            Op::ConvT { x, w, b, stride, pad } => {
                let ws = self.shape(*w).to_vec();
                let xs = self.shape(*x).to_vec();
                let (cin, cout, k) = (ws[0], ws[1], ws[2]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let g = ConvGeom::new(cout, oh, ow, k, *stride, *pad).expect("forward geometry");
                let batch = xs[0];
                let hw = xs[2] * xs[3];
                let rows = cout * k * k;
                let out_len = cout * oh * ow;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let mut gx = if want_x { vec![T::zero(); batch * cin * hw] } else { Vec::new() };
                let mut gw = if want_w { vec![T::zero(); cin * rows] } else { Vec::new() };
                for bi in 0..batch {
                    let dcols = im2col(&gy[bi * out_len..(bi + 1) * out_len], &g);
                    if want_x {
                        gemm(cin, rows, hw, wv, &dcols, &mut gx[bi * cin * hw..(bi + 1) * cin * hw]);
                    }
                    if want_w {
                        let dt = transpose(rows, hw, &dcols);
                        gemm(cin, hw, rows, &xv[bi * cin * hw..(bi + 1) * cin * hw], &dt, &mut gw);
                    }
                }
                if want_x {
                    self.acc(grads, *x, gx);
                }
                if want_w {
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.acc(grads, *b, channel_sums(gy, cout, oh * ow));
                    }
                }
            }
            Op::AvgPool(x, k) => {
                let s = self.shape(*x).to_vec();
                let (oh, ow) = (s[2] / k, s[3] / k);
                let inv = T::lit(1.0 / (k * k) as f64);
                let mut gx = vec![T::zero(); s.iter().product()];
                for p in 0..s[0] * s[1] {
                    for yy in 0..s[2] {
                        for xx in 0..s[3] {
                            gx[(p * s[2] + yy) * s[3] + xx] = gy[(p * oh + yy / k) * ow + xx / k] * inv;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => self.acc(grads, *x, gy.to_vec()),
            Op::Permute(x, perm) => {
                let out_shape = node.value.shape();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, permute_data(gy, out_shape, &inv));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&gy[o * total + offset..o * total + offset + len]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = vec![T::zero(); s.iter().product()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::MeanAxis(x, axis) => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let inv = T::lit(1.0 / n as f64);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend(gy[o * inner..(o + 1) * inner].iter().map(|&g| g * inv));
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Bmm { a, b, tb } => {
                let sa = self.shape(*a).to_vec();
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); bn * m * k];
                    for i in 0..bn {
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // b as [N,K] is exactly bᵀ of the [K,N] view
                        let bt = if *tb { bi.to_vec() } else { transpose(k, n, bi) };
                        gemm(m, n, k, &gy[i * m * n..(i + 1) * m * n], &bt, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bn * k * n];
                    for i in 0..bn {
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, &transpose(m, n, gyi), ai, dst);
                        } else {
                            gemm(k, m, n, &transpose(m, k, ai), gyi, dst);
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![gy[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        self.acc(grads, v, gy.iter().map(|&g| g * w).collect());
                    }
                }
            }
            Op::Loss { a, b, kind, saved } => {
                let g0 = gy[0];
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let rows = self.shape(*a)[0];
                let width = va.len() / rows;
                let rinv = T::lit(1.0 / rows as f64);
                let ninv = T::lit(1.0 / va.len() as f64);
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); va.len()];
                match kind {
                    LossKind::L2 | LossKind::SqL2 => {
                        for r in 0..rows {
                            let coef = if *kind == LossKind::L2 {
                                if saved[r] > T::zero() {
                                    g0 * rinv / saved[r]
                                } else {
                                    T::zero()
                                }
                            } else {
                                g0 * rinv * T::lit(2.0)
                            };
                            for j in r * width..(r + 1) * width {
                                let d = coef * (va[j] - vb[j]);
                                ga[j] = d;
                                gb[j] = -d;
                            }
                        }
                    }
                    LossKind::Mse => {
                        for j in 0..va.len() {
                            let d = g0 * ninv * T::lit(2.0) * (va[j] - vb[j]);
                            ga[j] = d;
                            gb[j] = -d;
                        }
                    }
                    LossKind::Bce => {
                        let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
                        for j in 0..va.len() {
                            let p = va[j].max(lo).min(hi);
                            let t = vb[j];
                            if va[j] > lo && va[j] < hi {
                                ga[j] = g0 * ninv * (p - t) / (p * (T::one() - p));
                            }
                            gb[j] = -g0 * ninv * (p.ln() - (T::one() - p).ln());
                        }
                    }
                    LossKind::Cosine => {
                        for r in 0..rows {
                            let (na, nb, cos) = (saved[3 * r], saved[3 * r + 1], saved[3 * r + 2]);
                            for j in r * width..(r + 1) * width {
                                ga[j] = -g0 * rinv * (vb[j] / (na * nb) - cos * va[j] / (na * na));
                                gb[j] = -g0 * rinv * (va[j] / (na * nb) - cos * vb[j] / (nb * nb));
                            }
                        }
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
        }
        Ok(())
    }
}

fn channel_sums<T: Real>(gy: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (pi, p) in gy.chunks_exact(plane).enumerate() {
        gb[pi % channels] = gb[pi % channels] + p.iter().fold(T::zero(), |a, &b| a + b);
    }
    gb
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
