//! The computation tape: forward ops append value nodes, `backward` sweeps
//! the tape in reverse and routes gradients into the parameter registry.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;

use super::registry::ParameterRegistry;
use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Clamp bound for arccos inputs; beyond it the gradient is defined as zero.
const ACOS_CLAMP: f64 = 1.0 - 1e-7;
/// Probabilities entering binary cross-entropy are clamped to this range.
const BCE_CLAMP: f64 = 1e-7;
/// Rows shorter than this are treated as zero by the row-normalize ops.
const ROW_NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const BATCH_NORM_EPS: f64 = 1e-5;

enum Rule {
    Leaf,
    Param { name: String },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    ScalarMul { a: NodeId, k: f64 },
    AddRow { a: NodeId, bias: NodeId },
    RepeatRow { a: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Log { a: NodeId },
    Abs { a: NodeId },
    AcosClamp { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    MeanAxis0 { a: NodeId },
    MaxAxis0 { a: NodeId, argmax: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { a: NodeId, axis: usize, start: usize },
    Reshape { a: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    GlobalAvgPool { x: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, var: Vec<f64>, affine_only: bool },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    RowNormalize { a: NodeId },
    RowL2Norm { a: NodeId },
    Bce { p: NodeId, labels: Tensor },
    Huber { d: NodeId, delta: f64 },
    GatherRows { q: NodeId, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    rule: Rule,
}

/// Reverse-mode autodiff tape over [`Tensor`] values.
///
/// A graph is built fresh for every forward pass; `backward` may run once.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// out = a·op(A)·op(B) + (accumulate ? out : 0), with A: (m×k), B: (k×n).
fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let av = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm lhs shape");
    let bv = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm rhs shape");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = ndarray::ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    general_mat_mul(1.0, &av, &bv, if accumulate { 1.0 } else { 0.0 }, &mut cv);
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected 2-D tensor, got {:?}", s))),
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(shape_err(op, format!("expected 4-D tensor, got {:?}", s))),
    }
}

/// Gathers conv patches into a (n·out_h·out_w) × (c·k·k) matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let cols_w = c * k * k;
    let mut cols = vec![0.0; n * out_h * out_w * cols_w];
    for ni in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = ((ni * out_h + oy) * out_w + ox) * cols_w;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ((ni * c + ci) * h + iy as usize) * w;
                        let dst = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst + kx] = x[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input image grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [f64],
) {
    let cols_w = c * k * k;
    for ni in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = ((ni * out_h + oy) * out_w + ox) * cols_w;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = ((ni * c + ci) * h + iy as usize) * w;
                        let src = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[dst + ix as usize] += cols[src + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, needs_grad: bool, rule: Rule) -> Result<NodeId, TensorError> {
        ensure_finite(op, &value)?;
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            rule,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.push("input", value, false, Rule::Leaf)
    }

    /// Leaf backed by a registry parameter. Frozen parameters enter as
    /// constants so backward skips them entirely.
    pub fn param(&mut self, reg: &ParameterRegistry, name: &str) -> Result<NodeId, TensorError> {
        let value = reg.get(name)?.clone();
        if reg.is_trainable(name) {
            self.push("param", value, true, Rule::Param { name: name.to_string() })
        } else {
            self.push("param", value, false, Rule::Leaf)
        }
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        rule: Rule,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(op, value, needs, rule)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Rule::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Rule::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Rule::Mul { a, b })
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        rule: Rule,
    ) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x)).collect())?;
        let needs = self.needs(a);
        self.push(op, value, needs, rule)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("neg", a, |x| -x, Rule::Neg { a })
    }

    /// Broadcast multiply by a compile-time scalar.
    pub fn scalar_mul(&mut self, a: NodeId, k: f64) -> Result<NodeId, TensorError> {
        self.unary("scalar_mul", a, |x| k * x, Rule::ScalarMul { a, k })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("relu", a, |x| x.max(0.0), Rule::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Rule::Sigmoid { a },
        )
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("log", a, |x| x.ln(), Rule::Log { a })
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("abs", a, |x| x.abs(), Rule::Abs { a })
    }

    /// arccos with the argument clamped to ±(1 − 1e-7); clamped inputs get
    /// zero gradient.
    pub fn acos_clamped(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary("acos_clamped", a, |x| x.clamp(-ACOS_CLAMP, ACOS_CLAMP).acos(), Rule::AcosClamp { a })
    }

    /// Adds a length-C bias vector to every row of an R×C matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.nodes[a.0].value, "add_row")?;
        let vb = &self.nodes[bias.0].value;
        if vb.shape() != [c] {
            return Err(shape_err("add_row", format!("matrix {}x{} with bias {:?}", r, c, vb.shape())));
        }
        let va = &self.nodes[a.0].value;
        let mut data = va.data().to_vec();
        let bias_data = self.nodes[bias.0].value.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias_data) {
                *v += b;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let needs = self.needs(a) || self.needs(bias);
        self.push("add_row", value, needs, Rule::AddRow { a, bias })
    }

    /// Tiles a length-C vector into an n×C matrix.
    pub fn repeat_row(&mut self, a: NodeId, n: usize) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let c = match va.shape() {
            [c] => *c,
            s => return Err(shape_err("repeat_row", format!("expected 1-D vector, got {:?}", s))),
        };
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let needs = self.needs(a);
        self.push("repeat_row", Tensor::new(vec![n, c], data)?, needs, Rule::RepeatRow { a })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = dims2(&self.nodes[a.0].value, "matmul")?;
        let (kb, n) = dims2(&self.nodes[b.0].value, "matmul")?;
        if ka != kb {
            return Err(shape_err("matmul", format!("{}x{} @ {}x{}", m, ka, kb, n)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.nodes[a.0].value.data(), m, ka, false,
            self.nodes[b.0].value.data(), kb, n, false,
            &mut out, false,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, needs, Rule::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.nodes[a.0].value, "transpose")?;
        let va = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va[i * c + j];
            }
        }
        let needs = self.needs(a);
        self.push("transpose", Tensor::new(vec![c, r], out)?, needs, Rule::Transpose { a })
    }

    /// Numerically stable softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let (rows, cols, row_major) = match (va.shape(), axis) {
            ([n], 0) => (1usize, *n, true),
            ([r, c], 1) => (*r, *c, true),
            ([r, c], 0) => (*c, *r, false),
            (s, ax) => return Err(shape_err("softmax", format!("axis {} of shape {:?}", ax, s))),
        };
        let src = va.data();
        let stride = if row_major { (cols, 1) } else { (1, rows) };
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let idx = |j: usize| r * stride.0 + j * stride.1;
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                max = max.max(src[idx(j)]);
            }
            let mut denom = 0.0;
            for j in 0..cols {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                denom += e;
            }
            for j in 0..cols {
                out[idx(j)] /= denom;
            }
        }
        let needs = self.needs(a);
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", value, needs, Rule::Softmax { a, axis })
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        let needs = self.needs(a);
        self.push("mean_all", Tensor::scalar(m), needs, Rule::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.nodes[a.0].value.data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push("sum_all", Tensor::scalar(s), needs, Rule::SumAll { a })
    }

    /// Column means of an N×C matrix (the per-point vote average).
    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (n, c) = dims2(&self.nodes[a.0].value, "mean_axis0")?;
        if n == 0 {
            return Err(shape_err("mean_axis0", "zero rows".into()));
        }
        let va = self.nodes[a.0].value.data();
        let mut out = vec![0.0; c];
        for row in va.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let needs = self.needs(a);
        self.push("mean_axis0", Tensor::new(vec![c], out)?, needs, Rule::MeanAxis0 { a })
    }

    /// Column maxima of an N×C matrix; gradient flows to the first argmax row.
    pub fn max_axis0(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (n, c) = dims2(&self.nodes[a.0].value, "max_axis0")?;
        if n == 0 {
            return Err(shape_err("max_axis0", "zero rows".into()));
        }
        let va = self.nodes[a.0].value.data();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for (r, row) in va.chunks_exact(c).enumerate() {
            for (j, v) in row.iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = r;
                }
            }
        }
        let needs = self.needs(a);
        self.push("max_axis0", Tensor::new(vec![c], out)?, needs, Rule::MaxAxis0 { a, argmax })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let rank = first.len();
        if axis >= rank || rank > 2 {
            return Err(shape_err("concat", format!("axis {} of rank-{} tensors", axis, rank)));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != rank || (0..rank).any(|d| d != axis && s[d] != first[d]) {
                return Err(shape_err("concat", format!("incompatible part shapes {:?} vs {:?}", s, first)));
            }
            out_shape[axis] += s[axis];
        }
        let data = if axis == 0 {
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            data
        } else {
            // axis == 1: interleave rows
            let rows = first[0];
            let total_cols = out_shape[1];
            let mut data = vec![0.0; rows * total_cols];
            let mut col_off = 0;
            for p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.shape()[1];
                for r in 0..rows {
                    data[r * total_cols + col_off..r * total_cols + col_off + c]
                        .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
                }
                col_off += c;
            }
            data
        };
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            "concat",
            Tensor::new(out_shape, data)?,
            needs,
            Rule::Concat { parts: parts.to_vec(), axis },
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() || shape.len() > 2 || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("[{}, {}) along axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (out_shape, data) = if shape.len() == 1 {
            (vec![len], va.data()[start..start + len].to_vec())
        } else if axis == 0 {
            let c = shape[1];
            (vec![len, c], va.data()[start * c..(start + len) * c].to_vec())
        } else {
            let (r, c) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&va.data()[row * c + start..row * c + start + len]);
            }
            (vec![r, len], data)
        };
        let needs = self.needs(a);
        self.push("narrow", Tensor::new(out_shape, data)?, needs, Rule::Narrow { a, axis, start })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != va.len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", va.shape(), shape)));
        }
        let value = va.reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        self.push("reshape", value, needs, Rule::Reshape { a })
    }

    /// 2-D convolution over N×C×H×W input with Co×Ci×k×k weights.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let (n, c, h, wd) = dims4(&self.nodes[x.0].value, "conv2d")?;
        let (co, ci, k, k2) = dims4(&self.nodes[w.0].value, "conv2d")?;
        if ci != c || k != k2 {
            return Err(shape_err("conv2d", format!("input C={} vs weight Ci={}, kernel {}x{}", c, ci, k, k2)));
        }
        if let Some(bid) = b {
            let vb = &self.nodes[bid.0].value;
            if vb.shape() != [co] {
                return Err(shape_err("conv2d", format!("bias {:?} for Co={}", vb.shape(), co)));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err("conv2d", format!("kernel {} on {}x{} with pad {} stride {}", k, h, wd, pad, stride)));
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(self.nodes[x.0].value.data(), n, c, h, wd, k, stride, pad, out_h, out_w);
        let ckk = c * k * k;
        let rows = n * out_h * out_w;
        // outMat = cols @ Wᵀ  →  rows×co
        let mut out_mat = vec![0.0; rows * co];
        gemm(&cols, rows, ckk, false, self.nodes[w.0].value.data(), co, ckk, true, &mut out_mat, false);
        let mut out = vec![0.0; n * co * out_h * out_w];
        let bias = b.map(|bid| self.nodes[bid.0].value.data().to_vec());
        for ni in 0..n {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let row = ((ni * out_h + oy) * out_w + ox) * co;
                    for coi in 0..co {
                        let bv = bias.as_ref().map_or(0.0, |bd| bd[coi]);
                        out[((ni * co + coi) * out_h + oy) * out_w + ox] = out_mat[row + coi] + bv;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |bid| self.needs(bid));
        self.push(
            "conv2d",
            Tensor::new(vec![n, co, out_h, out_w], out)?,
            needs,
            Rule::Conv2d { x, w, b, stride, pad },
        )
    }

    /// Max pooling with square window `k` and stride `s`.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize, s: usize) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value, "max_pool2d")?;
        if k == 0 || s == 0 || h < k || w < k {
            return Err(shape_err("max_pool2d", format!("window {} stride {} on {}x{}", k, s, h, w)));
        }
        let out_h = (h - k) / s + 1;
        let out_w = (w - k) / s + 1;
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        let mut argmax = vec![0usize; out.len()];
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let idx = plane + (oy * s + ky) * w + (ox * s + kx);
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * out_h + oy) * out_w + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "max_pool2d",
            Tensor::new(vec![n, c, out_h, out_w], out)?,
            needs,
            Rule::MaxPool2d { x, argmax },
        )
    }

    /// Spatial mean per (sample, channel): N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value, "global_avg_pool")?;
        let src = self.nodes[x.0].value.data();
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            *o = src[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let needs = self.needs(x);
        self.push("global_avg_pool", Tensor::new(vec![n, c], out)?, needs, Rule::GlobalAvgPool { x })
    }

    /// Per-channel batch normalization of an N×C×H×W tensor.
    ///
    /// With `stats` = None the op computes batch statistics (returned so the
    /// caller can fold them into running buffers); with `stats` = Some the
    /// supplied running statistics are treated as constants and the op is a
    /// plain affine map.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Option<(&Tensor, &Tensor)>,
    ) -> Result<(NodeId, Option<(Tensor, Tensor)>), TensorError> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value, "batch_norm")?;
        for (nm, t) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[t.0].value.shape() != [c] {
                return Err(shape_err("batch_norm", format!("{} shape {:?} for C={}", nm, self.nodes[t.0].value.shape(), c)));
            }
        }
        let m = n * h * w;
        let src = self.nodes[x.0].value.data();
        let hw = h * w;
        let (mean, var, affine_only) = match stats {
            Some((rm, rv)) => {
                if rm.shape() != [c] || rv.shape() != [c] {
                    return Err(shape_err("batch_norm", "running stats must be length C".into()));
                }
                (rm.data().to_vec(), rv.data().to_vec(), true)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = (ni * c + ci) * hw;
                        for v in &src[plane..plane + hw] {
                            mean[ci] += v;
                        }
                    }
                }
                for mu in &mut mean {
                    *mu /= m as f64;
                }
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = (ni * c + ci) * hw;
                        for v in &src[plane..plane + hw] {
                            let d = v - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                for va in &mut var {
                    *va /= m as f64;
                }
                (mean, var, false)
            }
        };
        let g = self.nodes[gamma.0].value.data().to_vec();
        let be = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * hw;
                let istd = 1.0 / (var[ci] + BATCH_NORM_EPS).sqrt();
                for i in plane..plane + hw {
                    out[i] = g[ci] * (src[i] - mean[ci]) * istd + be[ci];
                }
            }
        }
        let batch_stats = (!affine_only)
            .then(|| (Tensor::new(vec![c], mean.clone()).unwrap(), Tensor::new(vec![c], var.clone()).unwrap()));
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            "batch_norm",
            Tensor::new(vec![n, c, h, w], out)?,
            needs,
            Rule::BatchNorm { x, gamma, beta, mean, var, affine_only },
        )?;
        Ok((id, batch_stats))
    }

    /// Per-row layer normalization of a T×F tensor with learnable gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, TensorError> {
        let (t, f) = dims2(&self.nodes[x.0].value, "layer_norm")?;
        for (nm, p) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[p.0].value.shape() != [f] {
                return Err(shape_err("layer_norm", format!("{} shape {:?} for F={}", nm, self.nodes[p.0].value.shape(), f)));
            }
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..t {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..f {
                out[r * f + j] = g[j] * (row[j] - mean) * istd + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", Tensor::new(vec![t, f], out)?, needs, Rule::LayerNorm { x, gamma, beta })
    }

    /// Normalizes each row to unit length; rows with near-zero norm map to
    /// zero rows and receive zero gradient.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (n, c) = dims2(&self.nodes[a.0].value, "row_normalize")?;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > ROW_NORM_EPS {
                for j in 0..c {
                    out[r * c + j] = row[j] / norm;
                }
            }
        }
        let needs = self.needs(a);
        self.push("row_normalize", Tensor::new(vec![n, c], out)?, needs, Rule::RowNormalize { a })
    }

    /// Euclidean norm of each row: N×C → N.
    pub fn row_l2norm(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (n, c) = dims2(&self.nodes[a.0].value, "row_l2norm")?;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; n];
        for r in 0..n {
            out[r] = src[r * c..(r + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let needs = self.needs(a);
        self.push("row_l2norm", Tensor::new(vec![n], out)?, needs, Rule::RowL2Norm { a })
    }

    /// Element-wise binary cross-entropy against constant labels, with the
    /// probability clamped to [1e-7, 1 − 1e-7].
    pub fn bce(&mut self, p: NodeId, labels: Tensor) -> Result<NodeId, TensorError> {
        let vp = &self.nodes[p.0].value;
        if vp.shape() != labels.shape() {
            return Err(shape_err("bce", format!("{:?} vs labels {:?}", vp.shape(), labels.shape())));
        }
        let data = vp
            .data()
            .iter()
            .zip(labels.data())
            .map(|(p, y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .collect();
        let value = Tensor::new(vp.shape().to_vec(), data)?;
        let needs = self.needs(p);
        self.push("bce", value, needs, Rule::Bce { p, labels })
    }

    /// Element-wise Huber penalty of a difference tensor.
    pub fn huber(&mut self, d: NodeId, delta: f64) -> Result<NodeId, TensorError> {
        self.unary(
            "huber",
            d,
            |x| {
                if x.abs() <= delta {
                    0.5 * x * x
                } else {
                    delta * (x.abs() - 0.5 * delta)
                }
            },
            Rule::Huber { d, delta },
        )
    }

    /// Picks `q[b, idx[b]]` from each row of a B×A matrix.
    pub fn gather_rows(&mut self, q: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let (b, a) = dims2(&self.nodes[q.0].value, "gather_rows")?;
        if idx.len() != b || idx.iter().any(|i| *i >= a) {
            return Err(shape_err("gather_rows", format!("{} indices for {}x{}", idx.len(), b, a)));
        }
        let src = self.nodes[q.0].value.data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, i)| src[r * a + i]).collect();
        let needs = self.needs(q);
        self.push("gather_rows", Tensor::new(vec![b], out)?, needs, Rule::GatherRows { q, idx: idx.to_vec() })
    }

    // ---- composites ----------------------------------------------------

    /// x @ w + bias (bias broadcast across rows).
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    /// Multi-head scaled-dot-product self-attention over T×D tokens,
    /// followed by the residual/norm/feed-forward sequence of a transformer
    /// encoder layer. `heads` must divide D.
    #[allow(clippy::too_many_arguments)]
    pub fn encoder_layer(
        &mut self,
        tokens: NodeId,
        heads: usize,
        wq: NodeId, bq: NodeId,
        wk: NodeId, bk: NodeId,
        wv: NodeId, bv: NodeId,
        wo: NodeId, bo: NodeId,
        ln1_g: NodeId, ln1_b: NodeId,
        ffn_w1: NodeId, ffn_b1: NodeId,
        ffn_w2: NodeId, ffn_b2: NodeId,
        ln2_g: NodeId, ln2_b: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (_t, d) = dims2(&self.nodes[tokens.0].value, "encoder_layer")?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("encoder_layer", format!("{} heads over width {}", heads, d)));
        }
        let dh = d / heads;
        let q = self.linear(tokens, wq, bq)?;
        let k = self.linear(tokens, wk, bk)?;
        let v = self.linear(tokens, wv, bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let qh = self.narrow(q, 1, hi * dh, dh)?;
            let kh = self.narrow(k, 1, hi * dh, dh)?;
            let vh = self.narrow(v, 1, hi * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scalar_mul(scores, scale)?;
            let attn = self.softmax(scores, 1)?;
            head_outs.push(self.matmul(attn, vh)?);
        }
        let merged = self.concat(&head_outs, 1)?;
        let projected = self.linear(merged, wo, bo)?;
        let post_attn = self.add(tokens, projected)?;
        let normed = self.layer_norm(post_attn, ln1_g, ln1_b)?;
        let hidden = self.linear(normed, ffn_w1, ffn_b1)?;
        let hidden = self.relu(hidden)?;
        let ffn_out = self.linear(hidden, ffn_w2, ffn_b2)?;
        let post_ffn = self.add(normed, ffn_out)?;
        self.layer_norm(post_ffn, ln2_g, ln2_b)
    }

    // ---- backward ------------------------------------------------------

    fn add_grad(&mut self, id: NodeId, update: impl FnOnce(&mut Tensor)) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        if self.nodes[id.0].grad.is_none() {
            let shape = self.nodes[id.0].value.shape().to_vec();
            self.nodes[id.0].grad = Some(Tensor::zeros(&shape));
        }
        update(self.nodes[id.0].grad.as_mut().unwrap());
    }

    /// Reverse sweep from a scalar loss; parameter gradients accumulate into
    /// `registry`. Intermediate gradients are dropped as soon as they have
    /// been propagated.
    pub fn backward(&mut self, loss: NodeId, registry: &mut ParameterRegistry) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(TensorError::DetachedGraph);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, grad, registry)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Tensor, registry: &mut ParameterRegistry) -> Result<(), TensorError> {
        // Rules are moved out and back to appease the borrow checker; values
        // of parents remain readable throughout.
        let rule = std::mem::replace(&mut self.nodes[i].rule, Rule::Leaf);
        match &rule {
            Rule::Leaf => {}
            Rule::Param { name } => registry.accumulate_grad(name, &g)?,
            Rule::Add { a, b } => {
                self.add_grad(*a, |t| add_assign(t, g.data(), 1.0));
                self.add_grad(*b, |t| add_assign(t, g.data(), 1.0));
            }
            Rule::Sub { a, b } => {
                self.add_grad(*a, |t| add_assign(t, g.data(), 1.0));
                self.add_grad(*b, |t| add_assign(t, g.data(), -1.0));
            }
            Rule::Mul { a, b } => {
                let vb = self.nodes[b.0].value.data().to_vec();
                self.add_grad(*a, |t| mul_add_assign(t, g.data(), &vb));
                let va = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*b, |t| mul_add_assign(t, g.data(), &va));
            }
            Rule::Neg { a } => self.add_grad(*a, |t| add_assign(t, g.data(), -1.0)),
            Rule::ScalarMul { a, k } => {
                let k = *k;
                self.add_grad(*a, |t| add_assign(t, g.data(), k));
            }
            Rule::AddRow { a, bias } => {
                self.add_grad(*a, |t| add_assign(t, g.data(), 1.0));
                let c = self.nodes[bias.0].value.len();
                self.add_grad(*bias, |t| {
                    for row in g.data().chunks_exact(c) {
                        for (o, v) in t.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Rule::RepeatRow { a } => {
                let c = self.nodes[a.0].value.len();
                self.add_grad(*a, |t| {
                    for row in g.data().chunks_exact(c) {
                        for (o, v) in t.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Rule::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(*a) {
                    let vb = self.nodes[b.0].value.data().to_vec();
                    self.add_grad(*a, |t| {
                        gemm(g.data(), m, n, false, &vb, k, n, true, t.data_mut(), true)
                    });
                }
                if self.needs(*b) {
                    let va = self.nodes[a.0].value.data().to_vec();
                    self.add_grad(*b, |t| {
                        gemm(&va, m, k, true, g.data(), m, n, false, t.data_mut(), true)
                    });
                }
            }
            Rule::Transpose { a } => {
                let (c, r) = (g.shape()[0], g.shape()[1]);
                self.add_grad(*a, |t| {
                    let td = t.data_mut();
                    for i2 in 0..c {
                        for j in 0..r {
                            td[j * c + i2] += g.data()[i2 * r + j];
                        }
                    }
                });
            }
            Rule::Relu { a } => {
                let va = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |t| {
                    for ((o, gv), x) in t.data_mut().iter_mut().zip(g.data()).zip(&va) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Rule::Sigmoid { a } => {
                let y = self.nodes[i].value.data().to_vec();
                self.add_grad(*a, |t| {
                    for ((o, gv), yv) in t.data_mut().iter_mut().zip(g.data()).zip(&y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Rule::Log { a } => {
                let va = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |t| {
                    for ((o, gv), x) in t.data_mut().iter_mut().zip(g.data()).zip(&va) {
                        *o += gv / x;
                    }
                });
            }
            Rule::Abs { a } => {
                let va = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |t| {
                    for ((o, gv), x) in t.data_mut().iter_mut().zip(g.data()).zip(&va) {
                        *o += gv * x.signum() * (*x != 0.0) as i32 as f64;
                    }
                });
            }
            Rule::AcosClamp { a } => {
                let va = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |t| {
                    for ((o, gv), x) in t.data_mut().iter_mut().zip(g.data()).zip(&va) {
                        if x.abs() < ACOS_CLAMP {
                            *o += -gv / (1.0 - x * x).sqrt();
                        }
                    }
                });
            }
            Rule::Softmax { a, axis } => {
                let y = self.nodes[i].value.clone();
                let (rows, cols, stride) = match (y.shape(), *axis) {
                    ([n], 0) => (1usize, *n, (*n, 1usize)),
                    ([r, c], 1) => (*r, *c, (*c, 1)),
                    ([r, c], 0) => (*c, *r, (1, *c)),
                    _ => unreachable!("softmax shapes validated in forward"),
                };
                self.add_grad(*a, |t| {
                    let td = t.data_mut();
                    for r in 0..rows {
                        let idx = |j: usize| r * stride.0 + j * stride.1;
                        let dot: f64 = (0..cols).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..cols {
                            let ij = idx(j);
                            td[ij] += y.data()[ij] * (g.data()[ij] - dot);
                        }
                    }
                });
            }
            Rule::MeanAll { a } => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g.item() / n;
                self.add_grad(*a, |t| {
                    for o in t.data_mut() {
                        *o += gv;
                    }
                });
            }
            Rule::SumAll { a } => {
                let gv = g.item();
                self.add_grad(*a, |t| {
                    for o in t.data_mut() {
                        *o += gv;
                    }
                });
            }
            Rule::MeanAxis0 { a } => {
                let n = self.nodes[a.0].value.shape()[0];
                let c = self.nodes[a.0].value.shape()[1];
                self.add_grad(*a, |t| {
                    for row in t.data_mut().chunks_exact_mut(c) {
                        for (o, gv) in row.iter_mut().zip(g.data()) {
                            *o += gv / n as f64;
                        }
                    }
                });
            }
            Rule::MaxAxis0 { a, argmax } => {
                let c = self.nodes[a.0].value.shape()[1];
                let argmax = argmax.clone();
                self.add_grad(*a, |t| {
                    for (j, (r, gv)) in argmax.iter().zip(g.data()).enumerate() {
                        t.data_mut()[r * c + j] += gv;
                    }
                });
            }
            Rule::Concat { parts, axis } => {
                let parts = parts.clone();
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.add_grad(p, |t| add_assign(t, &slice, 1.0));
                        offset += len;
                    }
                } else {
                    let total_cols = g.shape()[1];
                    let rows = g.shape()[0];
                    let mut col_off = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.shape()[1];
                        let mut slice = vec![0.0; rows * c];
                        for r in 0..rows {
                            slice[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data()[r * total_cols + col_off..r * total_cols + col_off + c]);
                        }
                        self.add_grad(p, |t| add_assign(t, &slice, 1.0));
                        col_off += c;
                    }
                }
            }
            Rule::Narrow { a, axis, start } => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (axis, start) = (*axis, *start);
                self.add_grad(*a, |t| {
                    let td = t.data_mut();
                    if shape.len() == 1 || axis == 0 {
                        let row_len = if shape.len() == 1 { 1 } else { shape[1] };
                        let base = start * row_len;
                        for (o, gv) in td[base..base + g.len()].iter_mut().zip(g.data()) {
                            *o += gv;
                        }
                    } else {
                        let c = shape[1];
                        let len = g.shape()[1];
                        for r in 0..g.shape()[0] {
                            for j in 0..len {
                                td[r * c + start + j] += g.data()[r * len + j];
                            }
                        }
                    }
                });
            }
            Rule::Reshape { a } => {
                self.add_grad(*a, |t| add_assign(t, g.data(), 1.0));
            }
            Rule::Conv2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = dims4(&self.nodes[x.0].value, "conv2d")?;
                let (co, _ci, k, _) = dims4(&self.nodes[w.0].value, "conv2d")?;
                let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
                let ckk = c * k * k;
                let rows = n * out_h * out_w;
                // Regroup incoming grad to (rows × co).
                let mut g_mat = vec![0.0; rows * co];
                for ni in 0..n {
                    for coi in 0..co {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                g_mat[((ni * out_h + oy) * out_w + ox) * co + coi] =
                                    g.data()[((ni * co + coi) * out_h + oy) * out_w + ox];
                            }
                        }
                    }
                }
                if let Some(bid) = b {
                    self.add_grad(*bid, |t| {
                        for row in g_mat.chunks_exact(co) {
                            for (o, gv) in t.data_mut().iter_mut().zip(row) {
                                *o += gv;
                            }
                        }
                    });
                }
                if self.needs(*w) {
                    let cols = im2col(self.nodes[x.0].value.data(), n, c, h, wd, k, *stride, *pad, out_h, out_w);
                    self.add_grad(*w, |t| {
                        gemm(&g_mat, rows, co, true, &cols, rows, ckk, false, t.data_mut(), true)
                    });
                }
                if self.needs(*x) {
                    let mut d_cols = vec![0.0; rows * ckk];
                    gemm(&g_mat, rows, co, false, self.nodes[w.0].value.data(), co, ckk, false, &mut d_cols, false);
                    let (stride, pad) = (*stride, *pad);
                    self.add_grad(*x, |t| {
                        col2im(&d_cols, n, c, h, wd, k, stride, pad, out_h, out_w, t.data_mut())
                    });
                }
            }
            Rule::MaxPool2d { x, argmax } => {
                let argmax = argmax.clone();
                self.add_grad(*x, |t| {
                    for (src, gv) in argmax.iter().zip(g.data()) {
                        t.data_mut()[*src] += gv;
                    }
                });
            }
            Rule::GlobalAvgPool { x } => {
                let (_, _, h, w) = dims4(&self.nodes[x.0].value, "global_avg_pool")?;
                let hw = (h * w) as f64;
                self.add_grad(*x, |t| {
                    for (plane, gv) in t.data_mut().chunks_exact_mut(h * w).zip(g.data()) {
                        for o in plane {
                            *o += gv / hw;
                        }
                    }
                });
            }
            Rule::BatchNorm { x, gamma, beta, mean, var, affine_only } => {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value, "batch_norm")?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let src = self.nodes[x.0].value.data().to_vec();
                let gm = self.nodes[gamma.0].value.data().to_vec();
                // Per-channel reductions of g and g·x̂.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = (ni * c + ci) * hw;
                        let istd = 1.0 / (var[ci] + BATCH_NORM_EPS).sqrt();
                        for idx in plane..plane + hw {
                            let xh = (src[idx] - mean[ci]) * istd;
                            sum_g[ci] += g.data()[idx];
                            sum_gx[ci] += g.data()[idx] * xh;
                        }
                    }
                }
                self.add_grad(*beta, |t| add_assign(t, &sum_g, 1.0));
                self.add_grad(*gamma, |t| add_assign(t, &sum_gx, 1.0));
                if self.needs(*x) {
                    let (mean, var, affine_only) = (mean.clone(), var.clone(), *affine_only);
                    self.add_grad(*x, |t| {
                        let td = t.data_mut();
                        for ni in 0..n {
                            for ci in 0..c {
                                let plane = (ni * c + ci) * hw;
                                let istd = 1.0 / (var[ci] + BATCH_NORM_EPS).sqrt();
                                for idx in plane..plane + hw {
                                    if affine_only {
                                        td[idx] += g.data()[idx] * gm[ci] * istd;
                                    } else {
                                        let xh = (src[idx] - mean[ci]) * istd;
                                        td[idx] += gm[ci] * istd / m
                                            * (m * g.data()[idx] - sum_g[ci] - xh * sum_gx[ci]);
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Rule::LayerNorm { x, gamma, beta } => {
                let (t_rows, f) = dims2(&self.nodes[x.0].value, "layer_norm")?;
                let src = self.nodes[x.0].value.data().to_vec();
                let gm = self.nodes[gamma.0].value.data().to_vec();
                let mut d_gamma = vec![0.0; f];
                let mut d_beta = vec![0.0; f];
                let mut dx = vec![0.0; src.len()];
                for r in 0..t_rows {
                    let row = &src[r * f..(r + 1) * f];
                    let grow = &g.data()[r * f..(r + 1) * f];
                    let mean = row.iter().sum::<f64>() / f as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
                    let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xh: Vec<f64> = row.iter().map(|v| (v - mean) * istd).collect();
                    let gy: Vec<f64> = grow.iter().zip(&gm).map(|(gv, gmv)| gv * gmv).collect();
                    let mean_gy = gy.iter().sum::<f64>() / f as f64;
                    let mean_gy_xh = gy.iter().zip(&xh).map(|(a2, b2)| a2 * b2).sum::<f64>() / f as f64;
                    for j in 0..f {
                        d_gamma[j] += grow[j] * xh[j];
                        d_beta[j] += grow[j];
                        dx[r * f + j] = istd * (gy[j] - mean_gy - xh[j] * mean_gy_xh);
                    }
                }
                self.add_grad(*gamma, |t| add_assign(t, &d_gamma, 1.0));
                self.add_grad(*beta, |t| add_assign(t, &d_beta, 1.0));
                self.add_grad(*x, |t| add_assign(t, &dx, 1.0));
            }
            Rule::RowNormalize { a } => {
                let (n, c) = dims2(&self.nodes[a.0].value, "row_normalize")?;
                let src = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |t| {
                    let td = t.data_mut();
                    for r in 0..n {
                        let row = &src[r * c..(r + 1) * c];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm <= ROW_NORM_EPS {
                            continue;
                        }
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let y: Vec<f64> = row.iter().map(|v| v / norm).collect();
                        let dot: f64 = y.iter().zip(grow).map(|(a2, b2)| a2 * b2).sum();
                        for j in 0..c {
                            td[r * c + j] += (grow[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
            Rule::RowL2Norm { a } => {
                let (n, c) = dims2(&self.nodes[a.0].value, "row_l2norm")?;
                let src = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |t| {
                    let td = t.data_mut();
                    for r in 0..n {
                        let row = &src[r * c..(r + 1) * c];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm <= ROW_NORM_EPS {
                            continue;
                        }
                        for j in 0..c {
                            td[r * c + j] += g.data()[r] * row[j] / norm;
                        }
                    }
                });
            }
            Rule::Bce { p, labels } => {
                let vp = self.nodes[p.0].value.data().to_vec();
                let labels = labels.clone();
                self.add_grad(*p, |t| {
                    for (((o, gv), pv), y) in t.data_mut().iter_mut().zip(g.data()).zip(&vp).zip(labels.data()) {
                        if *pv > BCE_CLAMP && *pv < 1.0 - BCE_CLAMP {
                            *o += gv * (pv - y) / (pv * (1.0 - pv));
                        }
                    }
                });
            }
            Rule::Huber { d, delta } => {
                let vd = self.nodes[d.0].value.data().to_vec();
                let delta = *delta;
                self.add_grad(*d, |t| {
                    for ((o, gv), x) in t.data_mut().iter_mut().zip(g.data()).zip(&vd) {
                        *o += gv * if x.abs() <= delta { *x } else { delta * x.signum() };
                    }
                });
            }
            Rule::GatherRows { q, idx } => {
                let a = self.nodes[q.0].value.shape()[1];
                let idx = idx.clone();
                self.add_grad(*q, |t| {
                    for (r, (i2, gv)) in idx.iter().zip(g.data()).enumerate() {
                        t.data_mut()[r * a + i2] += gv;
                    }
                });
            }
        }
        self.nodes[i].rule = rule;
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign(t: &mut Tensor, src: &[f64], scale: f64) {
    for (o, v) in t.data_mut().iter_mut().zip(src) {
        *o += scale * v;
    }
}

fn mul_add_assign(t: &mut Tensor, g: &[f64], other: &[f64]) {
    for ((o, gv), x) in t.data_mut().iter_mut().zip(g).zip(other) {
        *o += gv * x;
    }
}
