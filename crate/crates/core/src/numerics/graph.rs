//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape in reverse and propagates adjoints to every node that depends on
//! a parameter; constant inputs never receive gradient buffers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::{Gradients, ParamId, ParameterSet};
use crate::numerics::tensor::{kernels, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Softplus,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Conv2d { input: Var, kernel: Var, stride: usize },
    ChannelBias(Var, Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var),
    MeanRows(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward evaluation. Build one per loss; it owns its own gradient
/// buffers, so independent graphs can be evaluated against shared parameters.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_dims(input: &[usize], kernel: &[usize], stride: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = match *input {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim("conv2d", input, kernel)),
    };
    let &[f, kc, kh, kw] = kernel else {
        return Err(Error::dim("conv2d", input, kernel));
    };
    if kc != c || kh > h || kw > w || stride == 0 {
        return Err(Error::dim("conv2d", input, kernel));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    Ok((n, c, h, w, f, kh, kw, oh, ow))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Records a parameter. Repeated requests for the same parameter return
    /// the same node.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Records a parameter as a constant: its value is used but no gradient
    /// flows to it. Used for frozen encoders.
    pub fn frozen(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        self.input(params.get(id).clone())
    }

    /// Parameters touched by this graph, in id order.
    pub fn used_params(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector of length n to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.len() != xv.shape()[1] {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let n = bv.len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x · w + b` with `w` stored as in×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out = if av.shape() == bv.shape() {
            av.zip_map(bv, f)
        } else if bv.is_scalar() {
            let s = bv.item();
            av.map(|x| f(x, s))
        } else if av.is_scalar() {
            let s = av.item();
            bv.map(|y| f(s, y))
        } else {
            return Err(Error::dim("elementwise", av.shape(), bv.shape()));
        };
        if kind == Binary::Div && bv.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match kind {
            Unary::Relu => xv.map(|v| v.max(0.0)),
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Softplus => xv.map(softplus),
            Unary::Exp => xv.map(f64::exp),
            Unary::Square => xv.map(|v| v * v),
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                xv.map(f64::ln)
            }
        };
        let ng = self.needs(x);
        Ok(self.push(out, Op::Unary(kind, x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x).expect("tanh is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x).expect("softplus is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x).expect("square is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    /// Valid cross-correlation. `input` is C×H×W or N×C×H×W, `kernel` is
    /// F×C×kh×kw; the output keeps the batch axis if the input had one.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        let (n, c, h, w, f, kh, kw, oh, ow) = conv_dims(xv.shape(), kv.shape(), stride)?;
        let x = xv.data();
        let k = kv.data();
        let mut out = vec![0.0; n * f * oh * ow];
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            for fi in 0..f {
                let ob = &mut out[(b * f + fi) * oh * ow..(b * f + fi + 1) * oh * ow];
                for ci in 0..c {
                    let xc = &xb[ci * h * w..(ci + 1) * h * w];
                    let kc = &k[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for a in 0..kh {
                                let xr = &xc[(i * stride + a) * w + j * stride..][..kw];
                                let kr = &kc[a * kw..(a + 1) * kw];
                                for (xv, kv) in xr.iter().zip(kr) {
                                    acc += xv * kv;
                                }
                            }
                            ob[i * ow + j] += acc;
                        }
                    }
                }
            }
        }
        let shape = if xv.shape().len() == 3 {
            vec![f, oh, ow]
        } else {
            vec![n, f, oh, ow]
        };
        let out = Tensor::new(shape, out)?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
            ng,
        ))
    }

    /// Adds one bias per channel to an F×H×W or N×F×H×W tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let s = xv.shape();
        let f_axis = s.len().checked_sub(3).ok_or_else(|| Error::dim("channel_bias", s, bv.shape()))?;
        let f = s[f_axis];
        if bv.len() != f {
            return Err(Error::dim("channel_bias", s, bv.shape()));
        }
        let plane: usize = s[f_axis + 1..].iter().product();
        let mut out = xv.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bv.data()[k % f];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::ChannelBias(x, bias), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// [m×a] ++ [m×b] → [m×(a+b)].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.rows() != bv.rows() {
            return Err(Error::dim("concat_cols", av.shape(), bv.shape()));
        }
        let (m, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let out = Tensor::matrix(m, ca + cb, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Stacks `rows` copies of a length-n vector into an rows×n matrix.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if rows == 0 {
            return Err(Error::Contract("repeat_rows needs at least one row".into()));
        }
        let n = xv.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(xv.data());
        }
        let out = Tensor::matrix(rows, n, out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::RepeatRows(x), ng))
    }

    /// Mean over rows, accumulated in row order: [m×n] → [1×n].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::dim("mean_rows", xv.shape(), &[]));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::matrix(1, n, out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Propagates adjoints from a scalar `loss` and returns ∂loss/∂param for
    /// every parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Input => {}
                Op::Param(id) => out.push((id, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        kernels::gemm_nt(m, k, n, g.data(), bv.data(), &mut da);
                        accumulate(&mut adj, a, av.shape(), da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        kernels::gemm_tn(m, k, n, av.data(), g.data(), &mut db);
                        accumulate(&mut adj, b, bv.shape(), db);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(b) {
                        let bs = self.value(b).shape();
                        let n = self.value(b).len();
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut adj, b, bs, db);
                    }
                    if self.needs(x) {
                        accumulate_tensor(&mut adj, x, g);
                    }
                }
                Op::Binary(kind, a, b) => self.binary_backward(&mut adj, kind, a, b, &g),
                Op::Scale(x, s) => accumulate_tensor(&mut adj, x, g.map(|v| v * s)),
                Op::AddScalar(x) => accumulate_tensor(&mut adj, x, g),
                Op::Unary(kind, x) => {
                    let xv = self.value(x);
                    let yv = &node.value;
                    let d = match kind {
                        Unary::Relu => g.zip_map(xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                        Unary::Tanh => g.zip_map(yv, |g, y| g * (1.0 - y * y)),
                        Unary::Softplus => g.zip_map(xv, |g, x| g * sigmoid(x)),
                        Unary::Exp => g.zip_map(yv, |g, y| g * y),
                        Unary::Log => g.zip_map(xv, |g, x| g / x),
                        Unary::Square => g.zip_map(xv, |g, x| 2.0 * g * x),
                    };
                    accumulate_tensor(&mut adj, x, d);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                } => self.conv_backward(&mut adj, input, kernel, stride, &g)?,
                Op::ChannelBias(x, b) => {
                    if self.needs(b) {
                        let s = self.value(x).shape();
                        let f_axis = s.len() - 3;
                        let f = s[f_axis];
                        let plane: usize = s[f_axis + 1..].iter().product();
                        let mut db = vec![0.0; f];
                        for (k, chunk) in g.data().chunks(plane).enumerate() {
                            db[k % f] += chunk.iter().sum::<f64>();
                        }
                        accumulate(&mut adj, b, self.value(b).shape(), db);
                    }
                    if self.needs(x) {
                        accumulate_tensor(&mut adj, x, g);
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(x).shape().to_vec();
                    accumulate(&mut adj, x, &shape, g.into_data());
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
                    let m = g.rows();
                    let mut da = Vec::with_capacity(m * ca);
                    let mut db = Vec::with_capacity(m * cb);
                    for i in 0..m {
                        let row = g.row(i);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    if self.needs(a) {
                        accumulate(&mut adj, a, &[m, ca], da);
                    }
                    if self.needs(b) {
                        accumulate(&mut adj, b, &[m, cb], db);
                    }
                }
                Op::RepeatRows(x) => {
                    let xv = self.value(x);
                    let n = xv.len();
                    let mut dx = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in dx.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, x, xv.shape(), dx);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(x);
                    let m = xv.rows() as f64;
                    let mut dx = Vec::with_capacity(xv.len());
                    for _ in 0..xv.rows() {
                        dx.extend(g.data().iter().map(|v| v / m));
                    }
                    accumulate(&mut adj, x, xv.shape(), dx);
                }
                Op::Sum(x) => {
                    let shape = self.value(x).shape();
                    accumulate_tensor(&mut adj, x, Tensor::full(shape, g.item()));
                }
            }
        }
        Ok(Gradients::from_entries(out))
    }

    fn binary_backward(&self, adj: &mut [Option<Tensor>], kind: Binary, a: Var, b: Var, g: &Tensor) {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = g.shape();
        let bcast_a = av.shape() != out_shape;
        let bcast_b = bv.shape() != out_shape;
        let at = |i: usize, t: &Tensor, bc: bool| if bc { t.item() } else { t.data()[i] };
        let n = g.len();
        if self.needs(a) {
            let d: Vec<f64> = (0..n)
                .map(|i| {
                    let gi = g.data()[i];
                    match kind {
                        Binary::Add | Binary::Sub => gi,
                        Binary::Mul => gi * at(i, bv, bcast_b),
                        Binary::Div => gi / at(i, bv, bcast_b),
                    }
                })
                .collect();
            reduce_into(adj, a, av.shape(), d, bcast_a);
        }
        if self.needs(b) {
            let d: Vec<f64> = (0..n)
                .map(|i| {
                    let gi = g.data()[i];
                    match kind {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * at(i, av, bcast_a),
                        Binary::Div => {
                            let y = at(i, bv, bcast_b);
                            -gi * at(i, av, bcast_a) / (y * y)
                        }
                    }
                })
                .collect();
            reduce_into(adj, b, bv.shape(), d, bcast_b);
        }
    }

    fn conv_backward(&self, adj: &mut [Option<Tensor>], input: Var, kernel: Var, stride: usize, g: &Tensor) -> Result<()> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        let (n, c, h, w, f, kh, kw, oh, ow) = conv_dims(xv.shape(), kv.shape(), stride)?;
        let (x, k, gd) = (xv.data(), kv.data(), g.data());
        let need_x = self.needs(input);
        let need_k = self.needs(kernel);
        let mut dx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
        let mut dk = if need_k { vec![0.0; k.len()] } else { Vec::new() };
        for b in 0..n {
            for fi in 0..f {
                let gb = &gd[(b * f + fi) * oh * ow..(b * f + fi + 1) * oh * ow];
                for ci in 0..c {
                    let xoff = (b * c + ci) * h * w;
                    let koff = (fi * c + ci) * kh * kw;
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gb[i * ow + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for a in 0..kh {
                                let xrow = xoff + (i * stride + a) * w + j * stride;
                                let krow = koff + a * kw;
                                if need_k {
                                    for (dkv, xv) in dk[krow..krow + kw].iter_mut().zip(&x[xrow..xrow + kw]) {
                                        *dkv += gv * xv;
                                    }
                                }
                                if need_x {
                                    for (dxv, kv) in dx[xrow..xrow + kw].iter_mut().zip(&k[krow..krow + kw]) {
                                        *dxv += gv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(adj, input, xv.shape(), dx);
        }
        if need_k {
            accumulate(adj, kernel, kv.shape(), dk);
        }
        Ok(())
    }
}

fn reduce_into(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>, broadcast: bool) {
    if broadcast {
        let s: f64 = d.iter().sum();
        accumulate(adj, v, shape, vec![s]);
    } else {
        accumulate(adj, v, shape, d);
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>) {
    let t = Tensor::new(shape.to_vec(), d).expect("adjoint shape matches its node");
    accumulate_tensor(adj, v, t);
}

fn accumulate_tensor(adj: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}
