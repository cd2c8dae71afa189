//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are
//! appended in evaluation order, so the tape is topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Parameters are borrowed
//! from a [`ParamStore`] and never copied into the tape.

use super::params::{ParamId, ParamStore};
use super::tensor::{sgemm, Tensor};
use crate::error::{AtmError, Result};
use crate::scorer::ctc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Add(NodeId, NodeId),
    AddBias { x: NodeId, bias: NodeId },
    Mul(NodeId, NodeId),
    MulConst { x: NodeId, c: Tensor },
    AddConst(NodeId),
    Scale(NodeId, f32),
    Transpose(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f32>, rstd: Vec<f32> },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, cols: Vec<f32> },
    DepthwiseConv1d { x: NodeId, w: NodeId, b: NodeId },
    ChannelsToFrames(NodeId),
    SelectRows { x: NodeId, idx: Vec<usize> },
    MaskRows { x: NodeId, fill: NodeId, mask: Vec<bool> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    L2NormalizeRows(NodeId),
    GatherCols { x: NodeId, idx: Vec<Vec<usize>> },
    Pick { x: NodeId, idx: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    StraightThrough(NodeId),
    Ctc { logits: NodeId, grad: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul(..) => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::AddConst(_) => "add_const",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::ChannelsToFrames(_) => "channels_to_frames",
            Op::SelectRows { .. } => "select_rows",
            Op::MaskRows { .. } => "mask_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::GatherCols { .. } => "gather_cols",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::StraightThrough(_) => "straight_through",
            Op::Ctc { .. } => "ctc",
        }
    }
}

/// Geometry of a strided 2-D convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let h_out = h.div_ceil(stride);
        let w_out = w.div_ceil(stride);
        let pad_h = ((h_out - 1) * stride + k).saturating_sub(h);
        let pad_w = ((w_out - 1) * stride + k).saturating_sub(w);
        ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh: k,
            kw: k,
            stride,
            h_out,
            w_out,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate for output `(oy, ox)` and kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Gradients produced by a backward sweep.
pub struct Gradients {
    params: Vec<Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter; zero when the parameter was not reached.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Gradient of an arbitrary node that required grad.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }
}

fn acc(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f32]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta.to_vec())),
    }
}

const LN_EPS: f32 = 1e-5;
const NORM_EPS: f32 = 1e-12;

fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let x3 = x * x * x;
    let u = C * (x + 0.044_715 * x3);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x);
    (y, dy)
}

fn softmax_row(x: &[f32], out: &mut [f32]) {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = ((v - m) as f64).exp();
        *o = e as f32;
        s += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / s) as f32;
    }
}

fn log_softmax_row(x: &[f32], out: &mut [f32]) {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f64 = x.iter().map(|&v| ((v - m) as f64).exp()).sum();
    let lse = m as f64 + s.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v as f64 - lse) as f32;
    }
}

/// Row-wise softmax outside of any graph.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_row(src, dst);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        log_softmax_row(src, dst);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    /// A graph without parameters (inputs only).
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.params.expect("param node without store").get(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Node id and op name of the first non-finite forward value, if any.
    pub fn non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite.map(|i| (i, self.nodes[i].op.name()))
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, Op::Input, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.with_grad(false), Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let rg = self.params.expect("graph has no parameter store").get(id).requires_grad();
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: rg,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, bstr) = if transpose_b {
            assert_eq!(bv.cols(), k, "matmul_nt inner dims {:?} {:?}", av.shape(), bv.shape());
            (bv.rows(), (1, k))
        } else {
            assert_eq!(bv.rows(), k, "matmul inner dims {:?} {:?}", av.shape(), bv.shape());
            (bv.cols(), (bv.cols(), 1))
        };
        let mut out = vec![0.0; m * n];
        sgemm(m, k, n, 1.0, av.data(), (k, 1), bv.data(), bstr, 0.0, &mut out, (n, 1));
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, transpose_b },
            rg,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = *xv.shape().last().expect("add_bias on scalar");
        assert_eq!(bv.len(), c, "bias length");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddBias { x, bias }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: NodeId, c: Tensor) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), c.len(), "mul_const sizes");
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::MulConst { x, c }, rg)
    }

    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), c.len(), "add_const sizes");
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::AddConst(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, s: f32) -> NodeId {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| gelu(v).0);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let t = log_softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Normalise each row to zero mean and unit variance, then apply the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS as f64).sqrt();
            rstd.push(rs as f32);
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Strided 2-D convolution with "same" padding.
    /// `x: [c_in, h, w]`, `w: [c_out, c_in, k, k]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.shape().len(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(wv.shape().len(), 4, "conv2d weight must be [o, i, k, k]");
        let (c_in, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape()[1], c_in, "conv2d channel mismatch");
        let geom = ConvGeom::same(c_in, h, wd, c_out, k, stride);
        let (patch, pos) = (geom.patch(), geom.positions());
        let mut cols = vec![0.0; patch * pos];
        let xd = xv.data();
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let prow = (ci * k + ky) * k + kx;
                    let dst = &mut cols[prow * pos..(prow + 1) * pos];
                    for oy in 0..geom.h_out {
                        for ox in 0..geom.w_out {
                            if let Some((y, xx)) = geom.source(oy, ox, ky, kx) {
                                dst[oy * geom.w_out + ox] = xd[(ci * h + y) * wd + xx];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; c_out * pos];
        sgemm(c_out, patch, pos, 1.0, wv.data(), (patch, 1), &cols, (pos, 1), 0.0, &mut out, (pos, 1));
        let bv = self.value(b).data();
        for (o, row) in out.chunks_mut(pos).enumerate() {
            for v in row {
                *v += bv[o];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Per-channel 1-D convolution over time with "same" padding.
    /// `x: [t, d]`, `w: [d, k]`, `b: [d]`.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, d) = (xv.rows(), xv.cols());
        let k = wv.cols();
        assert_eq!(wv.rows(), d);
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            for c in 0..d {
                let mut s = bv.data()[c];
                for j in 0..k {
                    if let Some(src) = (ti + j).checked_sub(pad).filter(|&s| s < t) {
                        s += wv.data()[c * k + j] * xv.data()[src * d + c];
                    }
                }
                out[ti * d + c] = s;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_parts(vec![t, d], out),
            Op::DepthwiseConv1d { x, w, b },
            rg,
        )
    }

    /// `[c, t, f] -> [t, c*f]`
    pub fn channels_to_frames(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, t, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; c * t * f];
        for ci in 0..c {
            for ti in 0..t {
                let src = &xv.data()[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                out[ti * c * f + ci * f..ti * c * f + (ci + 1) * f].copy_from_slice(src);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![t, c * f], out), Op::ChannelsToFrames(x), rg)
    }

    /// Gather rows by index (embedding lookup when `x` is a table).
    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::SelectRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// Replace row `t` of `x` by the vector `fill` wherever `mask[t]`.
    pub fn mask_rows(&mut self, x: NodeId, fill: NodeId, mask: &[bool]) -> NodeId {
        let xv = self.value(x);
        let fv = self.value(fill);
        let c = xv.cols();
        assert_eq!(mask.len(), xv.rows(), "mask length");
        assert_eq!(fv.len(), c, "fill length");
        let mut out = xv.data().to_vec();
        for (row, &m) in out.chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(fv.data());
            }
        }
        let rg = self.rg(x) || self.rg(fill);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(t, Op::MaskRows { x, fill, mask: mask.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start < end && end <= c);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![r, w], out), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), r, "concat rows");
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let n = (src.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + NORM_EPS as f64).sqrt();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v as f64 / n) as f32;
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(t, Op::L2NormalizeRows(x), rg)
    }

    /// `y[i][j] = x[i][idx[i][j]]`; every row of `idx` has the same length.
    pub fn gather_cols(&mut self, x: NodeId, idx: Vec<Vec<usize>>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.rows());
        let k = idx.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(idx.len() * k);
        for (i, row) in idx.iter().enumerate() {
            assert_eq!(row.len(), k, "ragged gather");
            out.extend(row.iter().map(|&j| xv.row(i)[j]));
        }
        let rg = self.rg(x);
        let t = Tensor::from_parts(vec![idx.len(), k], out);
        self.push(t, Op::GatherCols { x, idx }, rg)
    }

    /// `y[i] = x[i][idx[i]]`
    pub fn pick(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.rows());
        let out = idx.iter().enumerate().map(|(i, &j)| xv.row(i)[j]).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::Pick { x, idx: idx.to_vec() },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let m = (s / xv.len() as f64) as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Column sums: `[r, c] -> [c]`.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let mut acc = vec![0.0f64; c];
        for row in xv.data().chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_parts(vec![c], acc.into_iter().map(|v| v as f32).collect());
        self.push(t, Op::SumRows(x), rg)
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: NodeId, hard: Tensor) -> NodeId {
        assert_eq!(self.value(soft).shape(), hard.shape(), "straight-through shapes");
        let rg = self.rg(soft);
        self.push(hard, Op::StraightThrough(soft), rg)
    }

    /// CTC negative log-likelihood of `target` given unnormalised `logits`
    /// of shape `[t, labels + 1]` (blank is the last column).
    pub fn ctc_loss(&mut self, logits: NodeId, target: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (t, c) = (lv.rows(), lv.cols());
        let lp = log_softmax_rows(lv);
        let lp64: Vec<f64> = lp.data().iter().map(|&v| v as f64).collect();
        let out = ctc::forward_backward(&lp64, t, c, c - 1, target)?;
        let probs: Vec<f64> = lp64.iter().map(|v| v.exp()).collect();
        let grad = probs
            .iter()
            .zip(&out.occupancy)
            .map(|(p, g)| (p - g) as f32)
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(out.loss as f32),
            Op::Ctc { logits, grad },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AtmError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::from_parts(lv.shape().to_vec(), vec![1.0]))])
    }

    /// Reverse sweep with explicit upstream gradients on any number of nodes.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        if let Some((node, op)) = self.non_finite() {
            return Err(AtmError::NumericFailure { node, op });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (id, g) in seeds {
            if g.len() != self.value(*id).len() {
                return Err(AtmError::Contract(format!(
                    "seed for node {} has {} values, node has {}",
                    id.0,
                    g.len(),
                    self.value(*id).len()
                )));
            }
            acc(&mut grads[id.0], self.value(*id).shape(), g.data());
            start = start.max(id.0 + 1);
        }
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut param_grads: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();

        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if !gy.is_finite() {
                return Err(AtmError::NumericFailure { node: i, op: node.op.name() });
            }
            self.backprop(i, &node.op, &gy, &mut grads, &mut param_grads);
            grads[i] = Some(gy);
        }

        let params = match self.params {
            Some(store) => param_grads
                .into_iter()
                .zip(store.ids())
                .map(|(g, id)| g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
                .collect(),
            None => Vec::new(),
        };
        Ok(Gradients { params, nodes: grads })
    }

    fn backprop(
        &self,
        i: usize,
        op: &Op,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
        param_grads: &mut [Option<Tensor>],
    ) {
        let y = self.value(NodeId(i));
        let g = gy.data();
        let push = |grads: &mut [Option<Tensor>], id: NodeId, delta: &[f32]| {
            if self.rg(id) {
                acc(&mut grads[id.0], self.value(id).shape(), delta);
            }
        };
        match op {
            Op::Input => {}
            Op::Param(p) => acc(&mut param_grads[p.0], y.shape(), g),
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if self.rg(*a) {
                    // dA = dY · Bᵀ   (or dY · B when b was transposed)
                    let mut da = vec![0.0; m * k];
                    if *transpose_b {
                        // B is [n, k]; dA[m,k] = dY[m,n] · B[n,k]
                        sgemm(m, n, k, 1.0, g, (n, 1), bv.data(), (k, 1), 0.0, &mut da, (k, 1));
                    } else {
                        // B is [k, n]; dA = dY · Bᵀ, Bᵀ[n,k] has strides (1, n)
                        sgemm(m, n, k, 1.0, g, (n, 1), bv.data(), (1, n), 0.0, &mut da, (k, 1));
                    }
                    push(grads, *a, &da);
                }
                if self.rg(*b) {
                    if *transpose_b {
                        // dB[n,k] = dYᵀ[n,m] · A[m,k]
                        let mut db = vec![0.0; n * k];
                        sgemm(n, m, k, 1.0, g, (1, n), av.data(), (k, 1), 0.0, &mut db, (k, 1));
                        push(grads, *b, &db);
                    } else {
                        // dB[k,n] = Aᵀ[k,m] · dY[m,n]
                        let mut db = vec![0.0; k * n];
                        sgemm(k, m, n, 1.0, av.data(), (1, k), g, (n, 1), 0.0, &mut db, (n, 1));
                        push(grads, *b, &db);
                    }
                }
            }
            Op::Add(a, b) => {
                push(grads, *a, g);
                push(grads, *b, g);
            }
            Op::AddBias { x, bias } => {
                push(grads, *x, g);
                if self.rg(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0f32; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    push(grads, *bias, &db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d: Vec<f32> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    push(grads, *a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<f32> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    push(grads, *b, &d);
                }
            }
            Op::MulConst { x, c } => {
                let d: Vec<f32> = g.iter().zip(c.data()).map(|(g, c)| g * c).collect();
                push(grads, *x, &d);
            }
            Op::AddConst(x) => push(grads, *x, g),
            Op::Scale(x, s) => {
                let d: Vec<f32> = g.iter().map(|v| v * s).collect();
                push(grads, *x, &d);
            }
            Op::Transpose(x) => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                push(grads, *x, &d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f32> = g.iter().zip(xv).map(|(g, &v)| g * gelu(v).1).collect();
                push(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (a * b) as f64).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot as f32);
                    }
                }
                push(grads, *x, &d);
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let s: f64 = gr.iter().map(|&v| v as f64).sum();
                    for j in 0..c {
                        dr[j] = gr[j] - (yr[j].exp() as f64 * s) as f32;
                    }
                }
                push(grads, *x, &d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = y.cols();
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            let dh = (gr[j] * gam[j]) as f64;
                            m1 += dh;
                            m2 += dh * hr[j] as f64;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = (gr[j] * gam[j]) as f64;
                            d[r * c + j] = (rstd[r] as f64 * (dh - m1 - hr[j] as f64 * m2)) as f32;
                        }
                    }
                    push(grads, *x, &d);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0f32; c];
                    let mut db = vec![0.0f32; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    push(grads, *gamma, &dg);
                    push(grads, *beta, &db);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, pos) = (geom.patch(), geom.positions());
                let c_out = geom.c_out;
                if self.rg(*w) {
                    // dW[c_out, patch] = dY[c_out, pos] · colsᵀ[pos, patch]
                    let mut dw = vec![0.0; c_out * patch];
                    sgemm(c_out, pos, patch, 1.0, g, (pos, 1), cols, (1, pos), 0.0, &mut dw, (patch, 1));
                    push(grads, *w, &dw);
                }
                if self.rg(*b) {
                    let db: Vec<f32> = g.chunks(pos).map(|r| r.iter().sum()).collect();
                    push(grads, *b, &db);
                }
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    // dcols[patch, pos] = Wᵀ[patch, c_out] · dY[c_out, pos]
                    let mut dcols = vec![0.0; patch * pos];
                    sgemm(patch, c_out, pos, 1.0, wv, (1, patch), g, (pos, 1), 0.0, &mut dcols, (pos, 1));
                    let mut dx = vec![0.0; geom.c_in * geom.h * geom.w];
                    let k = geom.kh;
                    for ci in 0..geom.c_in {
                        for ky in 0..k {
                            for kx in 0..geom.kw {
                                let prow = (ci * k + ky) * geom.kw + kx;
                                let src = &dcols[prow * pos..(prow + 1) * pos];
                                for oy in 0..geom.h_out {
                                    for ox in 0..geom.w_out {
                                        if let Some((yy, xx)) = geom.source(oy, ox, ky, kx) {
                                            dx[(ci * geom.h + yy) * geom.w + xx] +=
                                                src[oy * geom.w_out + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    push(grads, *x, &dx);
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, d) = (xv.rows(), xv.cols());
                let k = wv.cols();
                let pad = (k - 1) / 2;
                let mut dx = vec![0.0; t * d];
                let mut dw = vec![0.0; d * k];
                let mut db = vec![0.0; d];
                for ti in 0..t {
                    for c in 0..d {
                        let gv = g[ti * d + c];
                        db[c] += gv;
                        for j in 0..k {
                            if let Some(src) = (ti + j).checked_sub(pad).filter(|&s| s < t) {
                                dw[c * k + j] += gv * xv.data()[src * d + c];
                                dx[src * d + c] += gv * wv.data()[c * k + j];
                            }
                        }
                    }
                }
                push(grads, *x, &dx);
                push(grads, *w, &dw);
                push(grads, *b, &db);
            }
            Op::ChannelsToFrames(x) => {
                let xs = self.value(*x).shape();
                let (c, t, f) = (xs[0], xs[1], xs[2]);
                let mut d = vec![0.0; c * t * f];
                for ci in 0..c {
                    for ti in 0..t {
                        d[(ci * t + ti) * f..(ci * t + ti + 1) * f]
                            .copy_from_slice(&g[ti * c * f + ci * f..ti * c * f + (ci + 1) * f]);
                    }
                }
                push(grads, *x, &d);
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[r * c + j];
                    }
                }
                push(grads, *x, &d);
            }
            Op::MaskRows { x, fill, mask } => {
                let c = y.cols();
                let mut dx = g.to_vec();
                let mut df = vec![0.0; c];
                for (row, &m) in dx.chunks_mut(c).zip(mask) {
                    if m {
                        for (a, v) in df.iter_mut().zip(row.iter_mut()) {
                            *a += *v;
                            *v = 0.0;
                        }
                    }
                }
                push(grads, *x, &dx);
                push(grads, *fill, &df);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, w) = (xv.cols(), y.cols());
                let mut d = vec![0.0; xv.len()];
                for r in 0..y.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                push(grads, *x, &d);
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(y.rows() * w);
                    for r in 0..y.rows() {
                        d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    push(grads, p, &d);
                    off += w;
                }
            }
            Op::L2NormalizeRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let n = (xr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + NORM_EPS as f64).sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (a * b) as f64).sum();
                    for j in 0..c {
                        d[r * c + j] = ((gr[j] as f64 - yr[j] as f64 * dot) / n) as f32;
                    }
                }
                push(grads, *x, &d);
            }
            Op::GatherCols { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let k = y.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, row) in idx.iter().enumerate() {
                    for (j, &src) in row.iter().enumerate() {
                        d[r * c + src] += g[r * k + j];
                    }
                }
                push(grads, *x, &d);
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, &j) in idx.iter().enumerate() {
                    d[r * c + j] += g[r];
                }
                push(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                push(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / n as f32; n];
                push(grads, *x, &d);
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let d: Vec<f32> = (0..xv.rows()).flat_map(|_| g.iter().copied()).collect();
                push(grads, *x, &d);
            }
            Op::StraightThrough(soft) => push(grads, *soft, g),
            Op::Ctc { logits, grad } => {
                let d: Vec<f32> = grad.iter().map(|v| v * g[0]).collect();
                push(grads, *logits, &d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::detached();
        let x = g.input(Tensor::scalar(3.0).with_grad(true));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(grads.node(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_y() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.5]]).unwrap();
        let p = softmax_rows(&logits);
        let mut g = Graph::detached();
        let x = g.input(logits.with_grad(true));
        let lp = g.log_softmax(x);
        let picked = g.pick(lp, &[2]);
        let nll = g.sum(picked);
        let loss = g.scale(nll, -1.0);
        let grads = g.backward(loss).unwrap();
        let dx = grads.node(x).unwrap();
        for j in 0..4 {
            let y = if j == 2 { 1.0 } else { 0.0 };
            assert_relative_eq!(dx.data()[j], p.data()[j] - y, epsilon = 1e-6);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::detached();
        let x = g.input(Tensor::zeros(&[2, 2]).with_grad(true));
        assert!(matches!(g.backward(x), Err(AtmError::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut g = Graph::detached();
        let x = g.input(Tensor::scalar(1.0).with_grad(true));
        let bad = g.constant(Tensor::scalar(f32::NAN));
        let y = g.mul(x, bad);
        match g.backward(y) {
            Err(AtmError::NumericFailure { node, .. }) => assert_eq!(node, bad.0),
            other => panic!("expected numeric failure, got {:?}", other.err()),
        }
    }

    #[test]
    fn unreferenced_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(2.0));
        let unused = store.add("unused", Tensor::zeros(&[3]));
        let mut g = Graph::new(&store);
        let p = g.param(used);
        let y = g.mul(p, p);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(used).item(), 4.0);
        assert_eq!(grads.param(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_forwards_hard_and_passes_gradient() {
        let mut g = Graph::detached();
        let soft = g.input(Tensor::new(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap().with_grad(true));
        let hard = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let st = g.straight_through(soft, hard.clone());
        assert_eq!(g.value(st), &hard);
        let w = g.mul_const(st, Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(soft).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn same_conv_geometry() {
        let even = ConvGeom::same(1, 98, 80, 4, 3, 2);
        assert_eq!((even.h_out, even.w_out, even.pad_top), (49, 40, 0));
        let odd = ConvGeom::same(1, 49, 40, 4, 3, 2);
        assert_eq!((odd.h_out, odd.pad_top), (25, 1));
    }

    #[test]
    fn mask_rows_routes_gradient_to_fill() {
        let mut g = Graph::detached();
        let x = g.input(Tensor::new(&[3, 2], vec![1.0; 6]).unwrap().with_grad(true));
        let m = g.input(Tensor::new(&[2], vec![0.0, 0.0]).unwrap().with_grad(true));
        let y = g.mask_rows(x, m, &[true, false, true]);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(grads.node(m).unwrap().data(), &[2.0, 2.0]);
    }
}
