//! Define-by-run reverse-mode differentiation over a closed operation set.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Operations evaluate eagerly, append a node, and return a [`Var`] handle;
//! [`Tape::backward`] then walks the nodes in reverse creation order and
//! accumulates adjoints. Construction order is the topological order, because
//! an operation can only consume handles that already exist.
//!
//! Every operation in the set has a hand-written adjoint, and every forward
//! result is scanned for non-finite values so a NaN is reported at the
//! operation that produced it, not later. A tape is confined to one thread
//! and one backward pass; build a fresh tape per step.

use super::conv;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Powf(Var, f64),
    MulScalar { x: Var, s: Var },
    Matmul(Var, Var),
    MatmulTN(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    L2NormSq(Var),
    Reshape(Var),
    ConcatCh(Vec<Var>),
    SliceCh { x: Var, start: usize, len: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// One forward computation plus (at most) one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The value held by a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the backward root with respect to this node, if computed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Inserts an input node. Only `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite("leaf", &value)?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Inserts a constant input (never differentiated).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // -----------------------------------------------------------------
    // elementwise
    // -----------------------------------------------------------------

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<f64> =
            ta.data().iter().zip(tb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        ensure_finite(name, &out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, op))
    }

    /// Multiplication by a detached constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::numeric("scale", format!("non-finite factor {c}")));
        }
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        ensure_finite("scale", &out)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Scale(x, c)))
    }

    /// Division by a detached scalar; rejects a zero divisor.
    pub fn div_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        if c == 0.0 {
            return Err(Error::numeric("div_scalar", "division by zero"));
        }
        self.scale(x, 1.0 / c)
    }

    /// Elementwise power with detached exponent.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| v.powf(p)).collect();
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        ensure_finite("powf", &out)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Powf(x, p)))
    }

    /// Broadcast-multiplies a tensor by a scalar node (shape `[1]`).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.nodes[s.0].value.is_scalar() {
            return Err(Error::shape(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.nodes[s.0].value.shape()),
            ));
        }
        let sv = self.nodes[s.0].value.item();
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| v * sv).collect();
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        ensure_finite("mul_scalar", &out)?;
        let rg = self.needs(x) || self.needs(s);
        Ok(self.push(out, rg, Op::MulScalar { x, s }))
    }

    // -----------------------------------------------------------------
    // activations
    // -----------------------------------------------------------------

    /// Leaky rectifier: `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        ensure_finite("leaky_relu", &out)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::LeakyRelu(x, slope)))
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        ensure_finite("sigmoid", &out)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Sigmoid(x)))
    }

    // -----------------------------------------------------------------
    // reductions
    // -----------------------------------------------------------------

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let out = Tensor::scalar(s);
        ensure_finite("sum", &out)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Sum(x)))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len() as f64;
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let out = Tensor::scalar(s / n);
        ensure_finite("mean", &out)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Mean(x)))
    }

    /// Squared Euclidean norm of all elements, as a scalar node.
    pub fn l2_norm_sq(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().map(|&v| v * v).sum();
        let out = Tensor::scalar(s);
        ensure_finite("l2_norm_sq", &out)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::L2NormSq(x)))
    }

    // -----------------------------------------------------------------
    // linear algebra
    // -----------------------------------------------------------------

    /// Matrix product of rank-2 nodes: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) =
            (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm_nn(self.nodes[a.0].value.data(), m, k, self.nodes[b.0].value.data(), n);
        let out = Tensor::new(vec![m, n], data)?;
        ensure_finite("matmul", &out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Matmul(a, b)))
    }

    /// Transposed-left matrix product: `a^T b` for `a: [k,m]`, `b: [k,n]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) =
            (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("matmul_tn", format!("{sa:?}^T x {sb:?}")));
        }
        let (k, m, n) = (sa[0], sa[1], sb[1]);
        let data = mm_tn(self.nodes[a.0].value.data(), k, m, self.nodes[b.0].value.data(), n);
        let out = Tensor::new(vec![m, n], data)?;
        ensure_finite("matmul_tn", &out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::MatmulTN(a, b)))
    }

    // -----------------------------------------------------------------
    // convolutions
    // -----------------------------------------------------------------

    /// 2-D convolution over `[C,H,W]` with square kernel, stride, zero pad.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[0] {
            return Err(Error::shape("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if sb != vec![sw[0]] {
            return Err(Error::shape("conv2d", format!("bias {sb:?} for {} filters", sw[0])));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive".to_string()));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} exceeds padded input")));
        }
        let oh = conv::out_dim(h, k, stride, pad);
        let ow = conv::out_dim(wd, k, stride, pad);
        let mut data = vec![0.0; co * oh * ow];
        conv::conv_fwd(
            self.nodes[x.0].value.data(),
            ci,
            h,
            wd,
            self.nodes[w.0].value.data(),
            co,
            k,
            stride,
            pad,
            Some(self.nodes[b.0].value.data()),
            &mut data,
        );
        let out = Tensor::new(vec![co, oh, ow], data)?;
        ensure_finite("conv2d", &out)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed 2-D convolution (the adjoint map of [`Tape::conv2d`]).
    ///
    /// Weights are `[C_in, C_out, k, k]`; the output extent `(out_h, out_w)`
    /// must convolve back to the input extent under the same stride and pad.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sw[0] != sx[0] {
            return Err(Error::shape("conv2d_transpose", format!("x {sx:?}, w {sw:?}")));
        }
        if sb != vec![sw[1]] {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("bias {sb:?} for {} filters", sw[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d_transpose", "stride must be positive".to_string()));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[1], sw[2]);
        if conv::out_dim(out_h, k, stride, pad) != h || conv::out_dim(out_w, k, stride, pad) != wd
        {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("target {out_h}x{out_w} does not convolve back to {h}x{wd}"),
            ));
        }
        let mut data = vec![0.0; co * out_h * out_w];
        conv::conv_dx(
            self.nodes[x.0].value.data(),
            ci,
            h,
            wd,
            self.nodes[w.0].value.data(),
            co,
            k,
            stride,
            pad,
            out_h,
            out_w,
            &mut data,
        );
        for co_i in 0..co {
            let bv = self.nodes[b.0].value.data()[co_i];
            for v in data[co_i * out_h * out_w..(co_i + 1) * out_h * out_w].iter_mut() {
                *v += bv;
            }
        }
        let out = Tensor::new(vec![co, out_h, out_w], data)?;
        ensure_finite("conv2d_transpose", &out)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, rg, Op::ConvT2d { x, w, b, stride, pad }))
    }

    // -----------------------------------------------------------------
    // shape ops
    // -----------------------------------------------------------------

    /// Content-preserving reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.reshaped(shape)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Concatenation of rank-3 tensors along the channel axis.
    pub fn concat_ch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_ch", "no inputs".to_string()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.len() != 3 {
            return Err(Error::shape("concat_ch", format!("rank {:?}", first)));
        }
        let (h, w) = (first[1], first[2]);
        let mut total_c = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::shape("concat_ch", format!("{s:?} vs [_, {h}, {w}]")));
            }
            total_c += s[0];
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::new(vec![total_c, h, w], data)?;
        ensure_finite("concat_ch", &out)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, rg, Op::ConcatCh(parts.to_vec())))
    }

    /// Channel-range view of a rank-3 tensor (adjoint scatters back).
    pub fn slice_ch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.nodes[x.0].value.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("slice_ch", format!("rank {s:?}")));
        }
        if len == 0 || start + len > s[0] {
            return Err(Error::shape(
                "slice_ch",
                format!("channels [{start}, {}) out of 0..{}", start + len, s[0]),
            ));
        }
        let plane = s[1] * s[2];
        let data = self.nodes[x.0].value.data()[start * plane..(start + len) * plane].to_vec();
        let out = Tensor::new(vec![len, s[1], s[2]], data)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::SliceCh { x, start, len }))
    }

    // -----------------------------------------------------------------
    // backward
    // -----------------------------------------------------------------

    /// Reverse-mode sweep from a scalar root; gradients land on the nodes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this tape".to_string()));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Graph(
                "no gradient-requiring leaf feeds the backward root".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.apply_adjoint(idx, &g, &mut grads);
            self.nodes[idx].grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    /// Routes an upstream gradient through one node's adjoint.
    fn apply_adjoint(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                let neg =
                    Tensor::new(g.shape().to_vec(), g.data().iter().map(|&v| -v).collect())
                        .expect("shape preserved");
                self.acc(grads, b, neg);
            }
            Op::Mul(a, b) => {
                let da = zip_mul(g, &self.nodes[b.0].value);
                let db = zip_mul(g, &self.nodes[a.0].value);
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::Scale(x, c) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| v * c).collect(),
                )
                .expect("shape preserved");
                self.acc(grads, x, dx);
            }
            Op::Powf(x, p) => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data().iter())
                        .map(|(&gv, &v)| gv * p * v.powf(p - 1.0))
                        .collect(),
                )
                .expect("shape preserved");
                self.acc(grads, x, dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.nodes[s.0].value.item();
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| v * sv).collect(),
                )
                .expect("shape preserved");
                let ds: f64 =
                    g.data().iter().zip(xv.data().iter()).map(|(&gv, &v)| gv * v).sum();
                self.acc(grads, x, dx);
                self.acc(grads, s, Tensor::scalar(ds));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // y = a b: da = g b^T, db = a^T g
                let da = mm_nt(g.data(), m, n, bv.data(), k);
                let db = mm_tn(av.data(), m, k, g.data(), n);
                self.acc(grads, a, Tensor::new(vec![m, k], da).expect("dims"));
                self.acc(grads, b, Tensor::new(vec![k, n], db).expect("dims"));
            }
            Op::MatmulTN(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (k, m) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // y = a^T b: da = b g^T, db = a g
                let da = mm_nt(bv.data(), k, n, g.data(), m);
                let db = mm_nn(av.data(), k, m, g.data(), n);
                self.acc(grads, a, Tensor::new(vec![k, m], da).expect("dims"));
                self.acc(grads, b, Tensor::new(vec![k, n], db).expect("dims"));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut dx = vec![0.0; ci * h * wd];
                conv::conv_dx(g.data(), co, oh, ow, wv.data(), ci, k, stride, pad, h, wd, &mut dx);
                let mut dw = vec![0.0; co * ci * k * k];
                conv::conv_dw(g.data(), co, oh, ow, xv.data(), ci, h, wd, k, stride, pad, &mut dw);
                let mut db = vec![0.0; co];
                conv::conv_db(g.data(), co, oh * ow, &mut db);
                self.acc(grads, x, Tensor::new(vec![ci, h, wd], dx).expect("dims"));
                self.acc(grads, w, Tensor::new(vec![co, ci, k, k], dw).expect("dims"));
                self.acc(grads, b, Tensor::new(vec![co], db).expect("dims"));
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (co, k) = (wv.shape()[1], wv.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                // Forward was conv_dx, so the input adjoint is conv_fwd.
                let mut dx = vec![0.0; ci * h * wd];
                conv::conv_fwd(g.data(), co, oh, ow, wv.data(), ci, k, stride, pad, None, &mut dx);
                let mut dw = vec![0.0; ci * co * k * k];
                conv::conv_dw(xv.data(), ci, h, wd, g.data(), co, oh, ow, k, stride, pad, &mut dw);
                let mut db = vec![0.0; co];
                conv::conv_db(g.data(), co, oh * ow, &mut db);
                self.acc(grads, x, Tensor::new(vec![ci, h, wd], dx).expect("dims"));
                self.acc(grads, w, Tensor::new(vec![ci, co, k, k], dw).expect("dims"));
                self.acc(grads, b, Tensor::new(vec![co], db).expect("dims"));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data().iter())
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { gv * slope })
                        .collect(),
                )
                .expect("shape preserved");
                self.acc(grads, x, dx);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[idx].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv.data().iter())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect(),
                )
                .expect("shape preserved");
                self.acc(grads, x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.acc(grads, x, Tensor::filled(&shape, gv));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                let gv = g.item() / n;
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.acc(grads, x, Tensor::filled(&shape, gv));
            }
            Op::L2NormSq(x) => {
                let gv = g.item();
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data().iter().map(|&v| 2.0 * gv * v).collect(),
                )
                .expect("shape preserved");
                self.acc(grads, x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let dx = g.reshaped(&shape).expect("element count preserved");
                self.acc(grads, x, dx);
            }
            Op::ConcatCh(parts) => {
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let plane = h * w;
                let mut offset = 0;
                for &p in &parts {
                    let c = self.nodes[p.0].value.shape()[0];
                    let part = g.data()[offset * plane..(offset + c) * plane].to_vec();
                    self.acc(grads, p, Tensor::new(vec![c, h, w], part).expect("dims"));
                    offset += c;
                }
            }
            Op::SliceCh { x, start, len } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let plane = s[1] * s[2];
                let mut dx = Tensor::zeros(&s);
                dx.data_mut()[start * plane..(start + len) * plane].copy_from_slice(g.data());
                self.acc(grads, x, dx);
            }
        }
    }

    /// Accumulates a gradient contribution onto a node that wants one.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                debug_assert_eq!(t.shape(), delta.shape());
                for (a, b) in t.data_mut().iter_mut().zip(delta.data().iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Errors out with the op name if a freshly computed tensor is non-finite.
fn ensure_finite(op: &str, t: &Tensor) -> Result<()> {
    match t.first_non_finite() {
        None => Ok(()),
        Some(i) => Err(Error::numeric(op, format!("non-finite value at flat index {i}"))),
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect(),
    )
    .expect("shape preserved")
}

/// `[m,k] x [k,n]` on raw row-major slices.
fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k,m]`, `b: [k,n]`.
fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m,k]`, `b: [n,k]`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow.iter()).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}
