//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Graph`] is a define-by-run tape: every operation is evaluated eagerly
//! and appended as a node whose parents precede it. [`Graph::grad`] walks the
//! tape backwards and *records* the backward pass as ordinary nodes, so the
//! result of one differentiation can be differentiated again. That is all
//! Hessian-vector products and double backpropagation need.
//!
//! Nodes hold flat `f64` vectors. Matrices are row-major and convolution
//! tensors are channel-major (`[channel][row][col]`). The op set is small and
//! closed under differentiation: the adjoint of every op is expressed with
//! ops from the same set (e.g. the three convolution ops are the three
//! partial derivatives of one trilinear form).
//!
//! Conventions at non-smooth points: `relu'` is the step function (and its
//! own derivative is zero), `|x|'` is `sign(x)` with `sign(0) = 0`.

use std::rc::Rc;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over a `[channels][height][width]` input
/// with a `[out_channels][in_channels][kernel][kernel]` kernel and zero padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
    /// Input index of each (output position, patch entry); `PAD` marks
    /// zero padding. Row-major `[out_height * out_width][in_channels * k * k]`.
    taps: Vec<u32>,
}

const PAD: u32 = u32::MAX;

impl ConvGeometry {
    pub fn new(
        (in_channels, in_height, in_width): (usize, usize, usize),
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || out_channels == 0 || in_channels == 0 {
            return Err(Error::validation(
                "convolution",
                "kernel, stride and channel counts must be positive",
            ));
        }
        let span_h = in_height + 2 * padding;
        let span_w = in_width + 2 * padding;
        if span_h < kernel || span_w < kernel {
            return Err(Error::validation(
                "convolution",
                format!("kernel {kernel} larger than padded input {span_h}x{span_w}"),
            ));
        }
        let out_height = (span_h - kernel) / stride + 1;
        let out_width = (span_w - kernel) / stride + 1;
        let mut taps = Vec::with_capacity(out_height * out_width * in_channels * kernel * kernel);
        for oy in 0..out_height {
            for ox in 0..out_width {
                for c in 0..in_channels {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                            let inside = iy >= padding && ix >= padding && iy - padding < in_height && ix - padding < in_width;
                            taps.push(if inside {
                                ((c * in_height + iy - padding) * in_width + ix - padding) as u32
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
        Ok(ConvGeometry {
            in_channels,
            in_height,
            in_width,
            out_channels,
            kernel,
            stride,
            padding,
            out_height,
            out_width,
            taps,
        })
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height * self.out_width
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Gathers the input patches into a `[positions][patch_len]` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        self.taps.iter().map(|&t| if t == PAD { 0.0 } else { x[t as usize] }).collect()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Sum(Var),
    Broadcast(Var, usize),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    // Zero-derivative ops.
    Step(Var),
    Sign(Var),
    Detach(Var),
    Softmax(Var),
    LogSumExp(Var),
    /// `W x` with `W` row-major `rows x cols`.
    MatVec(Var, Var),
    /// `W^T y`.
    MatTVec(Var, Var),
    /// `y x^T` flattened row-major.
    Outer(Var, Var),
    Conv(Var, Var, Rc<ConvGeometry>),
    ConvInputGrad(Var, Var, Rc<ConvGeometry>),
    ConvKernelGrad(Var, Var, Rc<ConvGeometry>),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>, usize),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf | Constant => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatVec(a, b) | MatTVec(a, b) | Outer(a, b) => {
                [Some(a), Some(b)]
            }
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvKernelGrad(a, b, _) => [Some(a), Some(b)],
            Scale(a, _) | Shift(a, _) | Sum(a) | Broadcast(a, _) | Exp(a) | Log(a) | Recip(a)
            | Softplus(a) | Sigmoid(a) | Tanh(a) | Relu(a) | Abs(a) | Softmax(a)
            | LogSumExp(a) | Gather(a, _) | ScatterAdd(a, _, _) => [Some(a), None],
            Step(_) | Sign(_) | Detach(_) => [None, None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// A recorded computation. See the module docs.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large |x|.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `len`. Handles to dropped nodes must not
    /// be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaves.retain(|v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-one node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        let v = self.push_raw(Op::Leaf, value);
        self.leaves.push(v);
        v
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push_raw(Op::Constant, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    fn push_raw(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Var {
        let value = self.compute(&op);
        self.push_raw(op, value)
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn compute(&self, op: &Op) -> Vec<f64> {
        use Op::*;
        match op {
            Leaf | Constant => unreachable!("leaves carry their own values"),
            Add(a, b) => self.zip(*a, *b, |x, y| x + y),
            Sub(a, b) => self.zip(*a, *b, |x, y| x - y),
            Mul(a, b) => self.zip(*a, *b, |x, y| x * y),
            Scale(a, c) => self.map(*a, |x| x * c),
            Shift(a, c) => self.map(*a, |x| x + c),
            Sum(a) => vec![self.value(*a).iter().sum()],
            Broadcast(a, n) => vec![self.value(*a)[0]; *n],
            Exp(a) => self.map(*a, f64::exp),
            Log(a) => self.map(*a, f64::ln),
            Recip(a) => self.map(*a, |x| 1.0 / x),
            Softplus(a) => self.map(*a, softplus),
            Sigmoid(a) => self.map(*a, sigmoid),
            Tanh(a) => self.map(*a, f64::tanh),
            Relu(a) => self.map(*a, |x| if x > 0.0 { x } else { 0.0 }),
            Abs(a) => self.map(*a, f64::abs),
            Step(a) => self.map(*a, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Sign(a) => self.map(*a, |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Detach(a) => self.value(*a).to_vec(),
            Softmax(a) => {
                let x = self.value(*a);
                let m = max_of(x);
                let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
            LogSumExp(a) => {
                let x = self.value(*a);
                let m = max_of(x);
                let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
                vec![m + s.ln()]
            }
            MatVec(w, x) => {
                let (w, x) = (self.value(*w), self.value(*x));
                let cols = x.len();
                w.chunks_exact(cols).map(|row| dot(row, x)).collect()
            }
            MatTVec(w, y) => {
                let (w, y) = (self.value(*w), self.value(*y));
                let cols = w.len() / y.len();
                let mut out = vec![0.0; cols];
                for (row, &yi) in w.chunks_exact(cols).zip(y) {
                    if yi != 0.0 {
                        axpy(yi, row, &mut out);
                    }
                }
                out
            }
            Outer(y, x) => {
                let (y, x) = (self.value(*y), self.value(*x));
                let mut out = Vec::with_capacity(y.len() * x.len());
                for &yi in y {
                    out.extend(x.iter().map(|&xj| yi * xj));
                }
                out
            }
            // All three are contractions of the same trilinear form
            // sum_{o,p,q} g[o,p] k[o,q] x[tap(p,q)].
            Conv(x, k, geom) => {
                let (x, k) = (self.value(*x), self.value(*k));
                let cols = geom.im2col(x);
                let (q, np) = (geom.patch_len(), geom.out_height * geom.out_width);
                let mut out = Vec::with_capacity(geom.output_len());
                for ko in k.chunks_exact(q) {
                    out.extend(cols.chunks_exact(q).map(|patch| dot(ko, patch)));
                }
                debug_assert_eq!(out.len(), geom.out_channels * np);
                out
            }
            ConvInputGrad(g, k, geom) => {
                let (g, k) = (self.value(*g), self.value(*k));
                let (q, np) = (geom.patch_len(), geom.out_height * geom.out_width);
                let mut out = vec![0.0; geom.input_len()];
                let mut row = vec![0.0; q];
                for p in 0..np {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for (o, ko) in k.chunks_exact(q).enumerate() {
                        let go = g[o * np + p];
                        if go != 0.0 {
                            axpy(go, ko, &mut row);
                        }
                    }
                    for (&t, &v) in geom.taps[p * q..(p + 1) * q].iter().zip(&row) {
                        if t != PAD {
                            out[t as usize] += v;
                        }
                    }
                }
                out
            }
            ConvKernelGrad(x, g, geom) => {
                let (x, g) = (self.value(*x), self.value(*g));
                let cols = geom.im2col(x);
                let (q, np) = (geom.patch_len(), geom.out_height * geom.out_width);
                let mut out = vec![0.0; geom.kernel_len()];
                for (o, ko) in out.chunks_exact_mut(q).enumerate() {
                    for (p, patch) in cols.chunks_exact(q).enumerate() {
                        let go = g[o * np + p];
                        if go != 0.0 {
                            axpy(go, patch, ko);
                        }
                    }
                }
                out
            }
            Gather(a, idx) => {
                let a = self.value(*a);
                idx.iter().map(|&i| a[i]).collect()
            }
            ScatterAdd(a, idx, n) => {
                let a = self.value(*a);
                let mut out = vec![0.0; *n];
                for (&i, &v) in idx.iter().zip(a) {
                    out[i] += v;
                }
                out
            }
        }
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return Err(Error::Shape(format!("{what}: operand lengths {la} and {lb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        Ok(self.push(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Shift(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    /// Repeats a length-one node `n` times.
    pub fn broadcast(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.len_of(a) != 1 {
            return Err(Error::Shape("broadcast expects a scalar".into()));
        }
        Ok(self.push(Op::Broadcast(a, n)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.push(Op::Recip(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a))
    }

    /// `1` where positive, else `0`. Treated as constant by differentiation.
    pub fn step(&mut self, a: Var) -> Var {
        self.push(Op::Step(a))
    }

    /// Treated as constant by differentiation; `sign(0) = 0`.
    pub fn sign(&mut self, a: Var) -> Var {
        self.push(Op::Sign(a))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        self.push(Op::Detach(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.push(Op::Softmax(a))
    }

    /// Max-shifted `ln(sum(exp(a)))`.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        self.push(Op::LogSumExp(a))
    }

    /// `W x` where `w` holds a row-major matrix with `len(x)` columns.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (lw, lx) = (self.len_of(w), self.len_of(x));
        if lx == 0 || lw % lx != 0 {
            return Err(Error::Shape(format!("matvec: matrix of {lw} entries, vector of {lx}")));
        }
        Ok(self.push(Op::MatVec(w, x)))
    }

    /// `W^T y` where `w` holds a row-major matrix with `len(y)` rows.
    pub fn mat_t_vec(&mut self, w: Var, y: Var) -> Result<Var> {
        let (lw, ly) = (self.len_of(w), self.len_of(y));
        if ly == 0 || lw % ly != 0 {
            return Err(Error::Shape(format!("mat_t_vec: matrix of {lw} entries, vector of {ly}")));
        }
        Ok(self.push(Op::MatTVec(w, y)))
    }

    /// Row-major outer product `y x^T`.
    pub fn outer(&mut self, y: Var, x: Var) -> Var {
        self.push(Op::Outer(y, x))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, geom: &Rc<ConvGeometry>) -> Result<Var> {
        self.check_len(x, geom.input_len(), "conv2d input")?;
        self.check_len(kernel, geom.kernel_len(), "conv2d kernel")?;
        Ok(self.push(Op::Conv(x, kernel, geom.clone())))
    }

    fn conv2d_input_grad(&mut self, g: Var, kernel: Var, geom: &Rc<ConvGeometry>) -> Var {
        self.push(Op::ConvInputGrad(g, kernel, geom.clone()))
    }

    fn conv2d_kernel_grad(&mut self, x: Var, g: Var, geom: &Rc<ConvGeometry>) -> Var {
        self.push(Op::ConvKernelGrad(x, g, geom.clone()))
    }

    /// `out[k] = a[idx[k]]`.
    pub fn gather(&mut self, a: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx = idx.into();
        let n = self.len_of(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of range for length {n}")));
        }
        Ok(self.push(Op::Gather(a, idx)))
    }

    /// `out[idx[k]] += a[k]` into a zero vector of length `len`.
    pub fn scatter_add(&mut self, a: Var, idx: impl Into<Rc<[usize]>>, len: usize) -> Result<Var> {
        let idx = idx.into();
        if idx.len() != self.len_of(a) || idx.iter().any(|&i| i >= len) {
            return Err(Error::Shape("scatter_add: index map does not fit".into()));
        }
        Ok(self.push(Op::ScatterAdd(a, idx, len)))
    }

    fn check_len(&self, v: Var, expected: usize, what: &str) -> Result<()> {
        let got = self.len_of(v);
        if got != expected {
            return Err(Error::Shape(format!("{what}: expected length {expected}, got {got}")));
        }
        Ok(())
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let value = self.compute(&self.nodes[i].op);
            self.nodes[i].value = value;
        }
    }

    pub fn set_leaf(&mut self, leaf: Var, value: &[f64]) -> Result<()> {
        if !matches!(self.nodes[leaf.0].op, Op::Leaf) {
            return Err(Error::Contract(format!("node {} is not a leaf", leaf.0)));
        }
        self.check_len(leaf, value.len(), "leaf value")?;
        self.nodes[leaf.0].value.copy_from_slice(value);
        Ok(())
    }

    /// Binds `leaf_values` (all leaves concatenated in creation order),
    /// replays the tape and returns the scalar value of `output`.
    pub fn evaluate(&mut self, output: Var, leaf_values: &[f64]) -> Result<f64> {
        let total: usize = self.leaves.iter().map(|&l| self.len_of(l)).sum();
        if total != leaf_values.len() {
            return Err(Error::Shape(format!(
                "evaluate: {} leaf values supplied, graph has {total}",
                leaf_values.len()
            )));
        }
        let mut offset = 0;
        for l in self.leaves.clone() {
            let n = self.len_of(l);
            self.nodes[l.0].value.copy_from_slice(&leaf_values[offset..offset + n]);
            offset += n;
        }
        self.replay();
        self.require_scalar(output)?;
        Ok(self.scalar(output))
    }

    fn require_scalar(&self, v: Var) -> Result<()> {
        let n = self.len_of(v);
        if n != 1 {
            return Err(Error::Contract(format!(
                "differentiated output must be scalar, node {} has length {n}",
                v.0
            )));
        }
        Ok(())
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) {
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.push(Op::Add(prev, contribution)),
        });
    }

    /// Records the reverse pass of `output` (a scalar) and returns one
    /// gradient node per entry of `wrt`. The returned nodes live in this graph
    /// and can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.require_scalar(output)?;
        let n = output.0 + 1;

        // Nodes that lie on a path from some `wrt` node; everything else has
        // a zero adjoint and is skipped.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] {
                relevant[i] = self.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|p| relevant[p.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[output.0] {
            adj[output.0] = Some(self.constant_scalar(1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backprop_node(Var(i), &op, g, &relevant, &mut adj);
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let len = self.len_of(w);
                    self.constant(vec![0.0; len])
                }
            })
            .collect())
    }

    fn backprop_node(&mut self, node: Var, op: &Op, g: Var, relevant: &[bool], adj: &mut [Option<Var>]) {
        use Op::*;
        let want = |v: Var| relevant[v.0];
        match *op {
            Leaf | Constant | Step(_) | Sign(_) | Detach(_) => {}
            Add(a, b) => {
                if want(a) {
                    self.accumulate(adj, a, g);
                }
                if want(b) {
                    self.accumulate(adj, b, g);
                }
            }
            Sub(a, b) => {
                if want(a) {
                    self.accumulate(adj, a, g);
                }
                if want(b) {
                    let c = self.push(Scale(g, -1.0));
                    self.accumulate(adj, b, c);
                }
            }
            Mul(a, b) => {
                if want(a) {
                    let c = self.push(Mul(g, b));
                    self.accumulate(adj, a, c);
                }
                if want(b) {
                    let c = self.push(Mul(g, a));
                    self.accumulate(adj, b, c);
                }
            }
            Scale(a, k) => {
                let c = self.push(Scale(g, k));
                self.accumulate(adj, a, c);
            }
            Shift(a, _) => self.accumulate(adj, a, g),
            Sum(a) => {
                let n = self.len_of(a);
                let c = self.push(Broadcast(g, n));
                self.accumulate(adj, a, c);
            }
            Broadcast(a, _) => {
                let c = self.push(Sum(g));
                self.accumulate(adj, a, c);
            }
            Exp(a) => {
                let c = self.push(Mul(g, node));
                self.accumulate(adj, a, c);
            }
            Log(a) => {
                let r = self.push(Recip(a));
                let c = self.push(Mul(g, r));
                self.accumulate(adj, a, c);
            }
            Recip(a) => {
                let sq = self.push(Mul(node, node));
                let m = self.push(Mul(g, sq));
                let c = self.push(Scale(m, -1.0));
                self.accumulate(adj, a, c);
            }
            Softplus(a) => {
                let s = self.push(Sigmoid(a));
                let c = self.push(Mul(g, s));
                self.accumulate(adj, a, c);
            }
            Sigmoid(a) => {
                // s (1 - s)
                let neg = self.push(Scale(node, -1.0));
                let one_minus = self.push(Shift(neg, 1.0));
                let d = self.push(Mul(node, one_minus));
                let c = self.push(Mul(g, d));
                self.accumulate(adj, a, c);
            }
            Tanh(a) => {
                // 1 - t^2
                let sq = self.push(Mul(node, node));
                let neg = self.push(Scale(sq, -1.0));
                let d = self.push(Shift(neg, 1.0));
                let c = self.push(Mul(g, d));
                self.accumulate(adj, a, c);
            }
            Relu(a) => {
                let mask = self.push(Step(a));
                let c = self.push(Mul(g, mask));
                self.accumulate(adj, a, c);
            }
            Abs(a) => {
                let s = self.push(Sign(a));
                let c = self.push(Mul(g, s));
                self.accumulate(adj, a, c);
            }
            Softmax(a) => {
                // s * (g - <g, s>)
                let n = self.len_of(a);
                let gs = self.push(Mul(g, node));
                let inner = self.push(Sum(gs));
                let b = self.push(Broadcast(inner, n));
                let centered = self.push(Sub(g, b));
                let c = self.push(Mul(node, centered));
                self.accumulate(adj, a, c);
            }
            LogSumExp(a) => {
                let n = self.len_of(a);
                let s = self.push(Softmax(a));
                let b = self.push(Broadcast(g, n));
                let c = self.push(Mul(b, s));
                self.accumulate(adj, a, c);
            }
            MatVec(w, x) => {
                if want(w) {
                    let c = self.push(Outer(g, x));
                    self.accumulate(adj, w, c);
                }
                if want(x) {
                    let c = self.push(MatTVec(w, g));
                    self.accumulate(adj, x, c);
                }
            }
            MatTVec(w, y) => {
                if want(w) {
                    let c = self.push(Outer(y, g));
                    self.accumulate(adj, w, c);
                }
                if want(y) {
                    let c = self.push(MatVec(w, g));
                    self.accumulate(adj, y, c);
                }
            }
            Outer(y, x) => {
                if want(y) {
                    let c = self.push(MatVec(g, x));
                    self.accumulate(adj, y, c);
                }
                if want(x) {
                    let c = self.push(MatTVec(g, y));
                    self.accumulate(adj, x, c);
                }
            }
            Conv(x, k, ref geom) => {
                if want(x) {
                    let c = self.conv2d_input_grad(g, k, geom);
                    self.accumulate(adj, x, c);
                }
                if want(k) {
                    let c = self.conv2d_kernel_grad(x, g, geom);
                    self.accumulate(adj, k, c);
                }
            }
            ConvInputGrad(y, k, ref geom) => {
                if want(y) {
                    let c = self.push(Conv(g, k, geom.clone()));
                    self.accumulate(adj, y, c);
                }
                if want(k) {
                    let c = self.conv2d_kernel_grad(g, y, geom);
                    self.accumulate(adj, k, c);
                }
            }
            ConvKernelGrad(x, y, ref geom) => {
                if want(x) {
                    let c = self.conv2d_input_grad(y, g, geom);
                    self.accumulate(adj, x, c);
                }
                if want(y) {
                    let c = self.push(Conv(x, g, geom.clone()));
                    self.accumulate(adj, y, c);
                }
            }
            Gather(a, ref idx) => {
                let n = self.len_of(a);
                let c = self.push(ScatterAdd(g, idx.clone(), n));
                self.accumulate(adj, a, c);
            }
            ScatterAdd(a, ref idx, _) => {
                let c = self.push(Gather(g, idx.clone()));
                self.accumulate(adj, a, c);
            }
        }
    }

    /// Gradient values of `output` with respect to `wrt`. The recorded
    /// backward nodes are discarded afterwards.
    pub fn gradient(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>> {
        let mark = self.len();
        let grads = self.grad(output, wrt)?;
        let values = grads.iter().map(|&g| self.value(g).to_vec()).collect();
        self.truncate(mark);
        Ok(values)
    }

    /// `H v` where `H` is the Hessian of `output` with respect to the node `x`,
    /// obtained by differentiating `<grad, v>` a second time.
    pub fn hessian_vector_product(&mut self, output: Var, x: Var, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x, v.len(), "hessian_vector_product direction")?;
        let mark = self.len();
        let gx = self.grad(output, &[x])?[0];
        let hv = self.hvp_from_gradient(gx, x, v)?;
        self.truncate(mark);
        Ok(hv)
    }

    /// `H v` given an already recorded gradient node `gx = d output / d x`.
    /// Nodes recorded by this call are discarded, so it can be called once
    /// per direction against the same gradient graph.
    pub fn hvp_from_gradient(&mut self, gx: Var, x: Var, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(gx, v.len(), "hessian_vector_product direction")?;
        let mark = self.len();
        let vc = self.constant(v.to_vec());
        let inner = self.dot(gx, vc)?;
        let hv = self.grad(inner, &[x])?[0];
        let out = self.value(hv).to_vec();
        self.truncate(mark);
        Ok(out)
    }

    /// Double backpropagation: `d g(d output / d x) / d params` where `outer`
    /// maps the recorded input-gradient node to a scalar (typically a norm).
    pub fn mixed_second<F>(&mut self, output: Var, x: Var, params: &[Var], outer: F) -> Result<Vec<Vec<f64>>>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        let mark = self.len();
        let gx = self.grad(output, &[x])?[0];
        let scalar = outer(self, gx)?;
        let grads = self.grad(scalar, params)?;
        let values = grads.iter().map(|&g| self.value(g).to_vec()).collect();
        self.truncate(mark);
        Ok(values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize; summation order is fixed.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + h;
                let up = f(&p);
                p[i] = x[i] - h;
                let down = f(&p);
                p[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn evaluates_simple_expressions() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0]);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.scalar(y), 9.0);

        let mut g = Graph::new();
        let a = g.leaf(vec![2.0]);
        let b = g.leaf(vec![3.0]);
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.evaluate(p, &[2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(g.gradient(p, &[a, b]).unwrap(), vec![vec![3.0], vec![2.0]]);

        let mut g = Graph::new();
        let z = g.leaf(vec![0.0]);
        let s = g.softplus(z);
        assert!((g.scalar(s) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cube_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2.0]);
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        assert_eq!(g.gradient(x3, &[x]).unwrap()[0], vec![12.0]);
    }

    #[test]
    fn evaluate_rejects_wrong_leaf_count() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0]);
        let s = g.sum(x);
        assert!(matches!(g.evaluate(s, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_of_vector_output_is_a_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0]);
        let y = g.exp(x);
        assert!(matches!(g.grad(y, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_form_hvp() {
        // f = 0.5 x^T A x, A = [[2,1],[1,3]]
        let mut g = Graph::new();
        let x = g.leaf(vec![0.3, -0.7]);
        let a = g.constant(vec![2.0, 1.0, 1.0, 3.0]);
        let ax = g.matvec(a, x).unwrap();
        let q = g.dot(x, ax).unwrap();
        let f = g.scale(q, 0.5);
        assert_eq!(g.hessian_vector_product(f, x, &[1.0, 0.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(g.hessian_vector_product(f, x, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_dimension_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0]);
        let s = g.sum(x);
        assert!(matches!(g.hessian_vector_product(s, x, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn mixed_second_closed_form() {
        // L = theta * x^2, g = (dL/dx)^2 = (2 theta x)^2, dg/dtheta = 8 theta x^2
        let mut g = Graph::new();
        let theta = g.leaf(vec![1.0]);
        let x = g.leaf(vec![1.0]);
        let x2 = g.mul(x, x).unwrap();
        let l = g.mul(theta, x2).unwrap();
        let d = g
            .mixed_second(l, x, &[theta], |g, gx| g.dot(gx, gx))
            .unwrap();
        assert_eq!(d[0], vec![8.0]);
    }

    #[test]
    fn mixed_second_without_parameter_dependence_is_zero() {
        let mut g = Graph::new();
        let theta = g.leaf(vec![2.0]);
        let x = g.leaf(vec![1.5]);
        let l = g.mul(x, x).unwrap();
        let d = g.mixed_second(l, x, &[theta], |g, gx| g.dot(gx, gx)).unwrap();
        assert_eq!(d[0], vec![0.0]);
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0, 2.0, -1.0]);
        let a = g.abs(x);
        let s = g.sum(a);
        assert_eq!(g.gradient(s, &[x]).unwrap()[0], vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn relu_second_derivative_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.5, -0.2]);
        let r = g.relu(x);
        let r2 = g.mul(r, x).unwrap(); // x * relu(x)
        let s = g.sum(r2);
        // d/dx = relu(x) + x step(x); second derivative 2 step(x) (step has zero derivative)
        assert_eq!(g.hessian_vector_product(s, x, &[1.0, 1.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.1, -0.4, 0.9]);
        let w = g.leaf(vec![0.3, 0.2, -0.5, 1.1, 0.7, -0.2]);
        let h = g.matvec(w, x).unwrap();
        let a = g.softplus(h);
        let t = g.tanh(a);
        let out = g.log_sum_exp(t);
        let before = g.scalar(out);
        let again = g.evaluate(out, &[0.1, -0.4, 0.9, 0.3, 0.2, -0.5, 1.1, 0.7, -0.2]).unwrap();
        assert_eq!(before.to_bits(), again.to_bits());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        // One expression touching each differentiable op.
        let geom = Rc::new(ConvGeometry::new((2, 5, 5), 3, 3, 2, 1).unwrap());
        let x0: Vec<f64> = (0..geom.input_len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let k0: Vec<f64> = (0..geom.kernel_len()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let n_out = geom.output_len();
        let build = |g: &mut Graph, xv: &[f64]| -> (Var, Var) {
            let x = g.leaf(xv.to_vec());
            let k = g.constant(k0.clone());
            let c = g.conv2d(x, k, &geom).unwrap();
            let s = g.softplus(c);
            let t = g.tanh(s);
            let sg = g.sigmoid(t);
            let w = g.constant((0..4 * n_out).map(|i| ((i % 9) as f64 - 4.0) / 10.0).collect());
            let h = g.matvec(w, sg).unwrap();
            let hp = g.shift(h, 2.0);
            let e = g.exp(hp);
            let l = g.ln(e);
            let r = g.recip(hp);
            let m = g.mul(l, r).unwrap();
            let ab = g.abs(h);
            let sm = g.softmax(m);
            let mix = g.add(sm, ab).unwrap();
            let gathered = g.gather(mix, vec![0, 2, 2, 3]).unwrap();
            let sc = g.scatter_add(gathered, vec![1, 0, 1, 2], 3).unwrap();
            let lse = g.log_sum_exp(sc);
            let out_c = g.outer(sc, sc);
            let tv = g.mat_t_vec(out_c, sc).unwrap();
            let tsum = g.sum(tv);
            let tot = g.add(lse, tsum).unwrap();
            (x, tot)
        };
        let mut g = Graph::new();
        let (x, out) = build(&mut g, &x0);
        let analytic = g.gradient(out, &[x]).unwrap().remove(0);
        let mut f = |p: &[f64]| {
            let mut g = Graph::new();
            let (_, o) = build(&mut g, p);
            g.scalar(o)
        };
        let numeric = central_diff(&mut f, &x0, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / (a.abs() + 1e-12) < 1e-5 || (a - n).abs() < 1e-9, "{a} vs {n}");
        }
    }
}
