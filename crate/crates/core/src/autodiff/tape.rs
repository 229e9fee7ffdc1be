//! Define-by-run reverse-mode tape.
//!
//! Every primitive computes its value eagerly, checks it for finiteness and
//! appends a node. Node inputs always reference earlier nodes, so the node
//! vector is already a topological order and `backward` is a single reverse
//! sweep.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::params::ParameterStore;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gemm, spd_inverse, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of an image-like tensor stored as `channels × (height·width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherCols(usize, Vec<usize>),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    LayerNormCols(usize, Vec<f64>),
    NormalizeCols(usize, Vec<f64>),
    Dropout(usize, Vec<f64>),
    Mean(usize),
    SumSquares(usize),
    RowMean(usize),
    RowSum(usize),
    Im2Col(usize, ConvGeometry),
    AvgPool2(usize, usize, usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SpdInverse(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias(..) => "add_bias",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherCols(..) => "gather_cols",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNormCols(..) => "layer_norm",
            Op::NormalizeCols(..) => "normalize",
            Op::Dropout(..) => "dropout",
            Op::Mean(..) => "mean",
            Op::SumSquares(..) => "sum_squares",
            Op::RowMean(..) => "row_mean",
            Op::RowSum(..) => "row_sum",
            Op::Im2Col(..) => "im2col",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Attention { .. } => "attention",
            Op::SpdInverse(..) => "spd_inverse",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients for every node reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("[{}, {}]", t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// A constant or input leaf. Gradients are computed for it but it is not
    /// tied to any parameter.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.input(t)
    }

    /// Leaf bound to a named parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(Op::Param(name.to_string()), value)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a.0).matmul(self.val(b.0))?;
        self.push(Op::MatMul(a.0, b.0), out)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if !ta.same_shape(tb) {
            return Err(Error::shape(op, format!("{} vs {}", shape_str(ta), shape_str(tb))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.val(a.0).zip(self.val(b.0), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.val(a.0).zip(self.val(b.0), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.val(a.0).zip(self.val(b.0), |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), out)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("div", a, b)?;
        let out = self.val(a.0).zip(self.val(b.0), |x, y| x / y);
        self.push(Op::Div(a.0, b.0), out)
    }

    fn check_col(&self, op: &'static str, x: Var, b: Var) -> Result<()> {
        let (tx, tb) = (self.val(x.0), self.val(b.0));
        if tb.cols() != 1 || tb.rows() != tx.rows() {
            return Err(Error::shape(
                op,
                format!("{} with column {}", shape_str(tx), shape_str(tb)),
            ));
        }
        Ok(())
    }

    /// `x + b` with the column vector `b` broadcast over columns.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_col("add_bias", x, b)?;
        let (tx, tb) = (self.val(x.0), self.val(b.0));
        let c = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i / c];
        }
        self.push(Op::AddBias(x.0, b.0), out)
    }

    /// `x ⊙ g` with the column vector `g` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        self.check_col("mul_col", x, g)?;
        let (tx, tg) = (self.val(x.0), self.val(g.0));
        let c = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tg.data()[i / c];
        }
        self.push(Op::MulCol(x.0, g.0), out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.val(x.0).map(|v| v * c);
        self.push(Op::Scale(x.0, c), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.val(first.0).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.val(p.0);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {} vs {}", t.cols(), cols),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.val(first.0).rows();
        let total: usize = parts.iter().map(|p| self.val(p.0).cols()).sum();
        for p in parts {
            let t = self.val(p.0);
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row count {} vs {}", t.rows(), rows),
                ));
            }
        }
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let t = self.val(p.0);
            let c = t.cols();
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + c].copy_from_slice(t.row_slice(r));
            }
            off += c;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x.0);
        if len == 0 || start + len > t.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, shape_str(t)),
            ));
        }
        let c = t.cols();
        let out = Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec());
        self.push(Op::SliceRows(x.0, start), out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x.0);
        if len == 0 || start + len > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, shape_str(t)),
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let out = gather_cols(t, &idx);
        self.push(Op::SliceCols(x.0, start), out)
    }

    /// Output column `j` is input column `idx[j]`; indices may repeat.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(x.0);
        if idx.is_empty() || idx.iter().any(|&i| i >= t.cols()) {
            return Err(Error::shape(
                "gather_cols",
                format!("indices out of range for {}", shape_str(t)),
            ));
        }
        let out = gather_cols(t, idx);
        self.push(Op::GatherCols(x.0, idx.to_vec()), out)
    }

    /// Repeat a column vector `n` times.
    pub fn broadcast_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        if self.val(x.0).cols() != 1 {
            return Err(Error::shape(
                "broadcast_cols",
                format!("expected a column, got {}", shape_str(self.val(x.0))),
            ));
        }
        self.gather_cols(x, &vec![0; n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).transpose();
        self.push(Op::Transpose(x.0), out)
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.val(x.0).clone().reshape(rows, cols)?;
        self.push(Op::Reshape(x.0), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(|v| v.max(0.0));
        self.push(Op::Relu(x.0), out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(f64::tanh);
        self.push(Op::Tanh(x.0), out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(f64::exp);
        self.push(Op::Exp(x.0), out)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(f64::ln);
        self.push(Op::Ln(x.0), out)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(f64::sqrt);
        self.push(Op::Sqrt(x.0), out)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(softplus);
        self.push(Op::Softplus(x.0), out)
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.val(x.0));
        self.push(Op::SoftmaxRows(x.0), out)
    }

    /// Normalize every column to zero mean and unit variance over rows.
    pub fn layer_norm_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.clone();
        let mut inv_std = vec![0.0; c];
        for j in 0..c {
            let mean = (0..r).map(|i| t.get(i, j)).sum::<f64>() / r as f64;
            let var = (0..r).map(|i| (t.get(i, j) - mean).powi(2)).sum::<f64>() / r as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[j] = is;
            for i in 0..r {
                out.set(i, j, (t.get(i, j) - mean) * is);
            }
        }
        self.push(Op::LayerNormCols(x.0, inv_std), out)
    }

    /// Scale each column to unit Euclidean norm. Zero columns are an error.
    pub fn normalize_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        let (r, c) = (t.rows(), t.cols());
        let mut norms = vec![0.0; c];
        let mut out = t.clone();
        for j in 0..c {
            let n = (0..r).map(|i| t.get(i, j).powi(2)).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::Invalid(format!("normalize: column {j} has zero norm")));
            }
            norms[j] = n;
            for i in 0..r {
                out.set(i, j, t.get(i, j) / n);
            }
        }
        self.push(Op::NormalizeCols(x.0, norms), out)
    }

    /// Inverted dropout. Column `j` draws its keep-mask from `stream.child(j)`,
    /// so a column's mask does not depend on how many columns are present.
    pub fn dropout(&mut self, x: Var, p: f64, stream: RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        let t = self.val(x.0);
        let (r, c) = (t.rows(), t.cols());
        let keep = 1.0 / (1.0 - p);
        let mut mask = vec![0.0; r * c];
        for j in 0..c {
            let mut rng = stream.child(j as u64).rng();
            for i in 0..r {
                mask[i * c + j] = if rng.random::<f64>() >= p { keep } else { 0.0 };
            }
        }
        self.dropout_with_mask(x, mask)
    }

    /// Multiply by an explicit dropout mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.val(x.0);
        if mask.len() != t.len() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} for {}", mask.len(), shape_str(t)),
            ));
        }
        let mut out = t.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(Op::Dropout(x.0, mask), out)
    }

    /// Mean of all entries, `1 × 1`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        let out = Tensor::from_vec(1, 1, vec![t.sum() / t.len() as f64]);
        self.push(Op::Mean(x.0), out)
    }

    /// Sum of squared entries, `1 × 1`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        let out = Tensor::from_vec(1, 1, vec![t.data().iter().map(|v| v * v).sum()]);
        self.push(Op::SumSquares(x.0), out)
    }

    /// Mean across columns, `rows × 1` (the ensemble mean).
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).row_mean();
        self.push(Op::RowMean(x.0), out)
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        let out = Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect());
        self.push(Op::RowSum(x.0), out)
    }

    /// Unfold image patches so a convolution becomes one matmul.
    pub fn im2col(&mut self, x: Var, g: ConvGeometry) -> Result<Var> {
        let t = self.val(x.0);
        if t.rows() != g.channels || t.cols() != g.height * g.width {
            return Err(Error::shape(
                "im2col",
                format!("{} vs geometry {:?}", shape_str(t), g),
            ));
        }
        let (ho, wo, k) = (g.out_height(), g.out_width(), g.kernel);
        let mut out = Tensor::zeros(g.channels * k * k, ho * wo);
        let ocols = ho * wo;
        for c in 0..g.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = c * k * k + ki * k + kj;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            out.data_mut()[row * ocols + oy * wo + ox] =
                                t.data()[c * g.height * g.width + iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
        self.push(Op::Im2Col(x.0, g), out)
    }

    /// 2×2 average pooling over `channels × (height·width)`.
    pub fn avg_pool2(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let t = self.val(x.0);
        if t.cols() != height * width || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return Err(Error::shape(
                "avg_pool2",
                format!("{} vs {height}x{width}", shape_str(t)),
            ));
        }
        let (h2, w2) = (height / 2, width / 2);
        let mut out = Tensor::zeros(t.rows(), h2 * w2);
        for c in 0..t.rows() {
            let src = t.row_slice(c);
            for y in 0..h2 {
                for xx in 0..w2 {
                    let s = src[2 * y * width + 2 * xx]
                        + src[2 * y * width + 2 * xx + 1]
                        + src[(2 * y + 1) * width + 2 * xx]
                        + src[(2 * y + 1) * width + 2 * xx + 1];
                    out.set(c, y * w2 + xx, 0.25 * s);
                }
            }
        }
        self.push(Op::AvgPool2(x.0, height, width), out)
    }

    /// Multi-head scaled dot-product attention over token columns.
    ///
    /// `q`, `k`, `v` are `d × (len·groups)`; token `p` of group `g` lives in
    /// column `p·groups + g`. Attention is confined to each group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        if !tq.same_shape(tk) || !tq.same_shape(tv) {
            return Err(Error::shape(
                "attention",
                format!("q {} k {} v {}", shape_str(tq), shape_str(tk), shape_str(tv)),
            ));
        }
        let (d, n) = (tq.rows(), tq.cols());
        if groups == 0 || n % groups != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{} with {groups} groups and {heads} heads", shape_str(tq)),
            ));
        }
        let len = n / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(d, n);
        let mut probs = vec![0.0; groups * heads * len * len];
        let mut row = vec![0.0; len];
        for g in 0..groups {
            for h in 0..heads {
                let base = (g * heads + h) * len * len;
                for p in 0..len {
                    let cp = p * groups + g;
                    for (pp, s) in row.iter_mut().enumerate() {
                        let cpp = pp * groups + g;
                        let mut acc = 0.0;
                        for i in h * dh..(h + 1) * dh {
                            acc += tq.get(i, cp) * tk.get(i, cpp);
                        }
                        *s = acc * scale;
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    for (pp, s) in row.iter().enumerate() {
                        let w = s / z;
                        probs[base + p * len + pp] = w;
                        let cpp = pp * groups + g;
                        for i in h * dh..(h + 1) * dh {
                            let cur = out.get(i, cp);
                            out.set(i, cp, cur + w * tv.get(i, cpp));
                        }
                    }
                }
            }
        }
        self.push(
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                groups,
                heads,
                probs,
            },
            out,
        )
    }

    /// Inverse of a symmetric positive-definite matrix. On a failed
    /// factorization `jitter · I` is added once before giving up.
    pub fn spd_inverse(&mut self, x: Var, jitter: f64) -> Result<Var> {
        let t = self.val(x.0);
        if t.rows() != t.cols() {
            return Err(Error::shape("spd_inverse", format!("not square: {}", shape_str(t))));
        }
        let inv = match spd_inverse(t) {
            Some(inv) => inv,
            None => {
                let mut j = t.clone();
                for i in 0..j.rows() {
                    let v = j.get(i, i);
                    j.set(i, i, v + jitter);
                }
                spd_inverse(&j).ok_or(Error::SingularInnovation)?
            }
        };
        self.push(Op::SpdInverse(x.0), inv)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape). Returns
    /// the gradient of `⟨seed, output⟩` for every node and adds parameter
    /// gradients into `store`.
    pub fn backward(&self, output: Var, seed: &Tensor, store: &mut ParameterStore) -> Result<Gradients> {
        let grads = self.gradients(output, seed)?;
        for node_idx in self.params.values() {
            if let (Op::Param(name), Some(g)) = (&self.nodes[node_idx.0].op, grads.get(*node_idx)) {
                store.accumulate(name, g)?;
            }
        }
        Ok(grads)
    }

    /// Like [`Tape::backward`] but without touching any parameter store.
    pub fn gradients(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Invalid("output does not belong to this tape".into()));
        }
        let out_val = &self.nodes[output.0].value;
        if !out_val.same_shape(seed) {
            return Err(Error::shape(
                "backward",
                format!("seed {} for output {}", shape_str(seed), shape_str(out_val)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |i: usize, t: Tensor| match &mut grads[i] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                gemm(g, false, tb, true, &mut ga, 0.0);
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                gemm(ta, true, g, false, &mut gb, 0.0);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip(self.val(*b), |x, y| x * y));
                acc(*b, g.zip(self.val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let tb = self.val(*b);
                acc(*a, g.zip(tb, |x, d| x / d));
                // d(a/b)/db = -y/b
                let t = g.zip(y, |x, yy| x * yy).zip(tb, |x, d| -x / d);
                acc(*b, t);
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                acc(*b, row_sums(g));
            }
            Op::MulCol(x, gain) => {
                let (tx, tg) = (self.val(*x), self.val(*gain));
                let c = g.cols();
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= tg.data()[i / c];
                }
                acc(*x, gx);
                acc(*gain, row_sums(&g.zip(tx, |a, b| a * b)));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.val(p).rows();
                    acc(p, Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()));
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    let idx: Vec<usize> = (off..off + c).collect();
                    acc(p, gather_cols(g, &idx));
                    off += c;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.val(*x);
                let c = tx.cols();
                let mut gx = tx.zeros_like();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::SliceCols(x, start) => {
                let tx = self.val(*x);
                let idx: Vec<usize> = (*start..*start + g.cols()).collect();
                acc(*x, scatter_cols(g, &idx, tx.cols()));
            }
            Op::GatherCols(x, idx) => {
                let tx = self.val(*x);
                acc(*x, scatter_cols(g, idx, tx.cols()));
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Reshape(x) => {
                let t = self.val(*x);
                acc(*x, Tensor::from_vec(t.rows(), t.cols(), g.data().to_vec()));
            }
            Op::Relu(x) => acc(*x, g.zip(self.val(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::Tanh(x) => acc(*x, g.zip(y, |d, t| d * (1.0 - t * t))),
            Op::Exp(x) => acc(*x, g.zip(y, |d, e| d * e)),
            Op::Ln(x) => acc(*x, g.zip(self.val(*x), |d, v| d / v)),
            Op::Sqrt(x) => acc(*x, g.zip(y, |d, s| d * 0.5 / s)),
            Op::Softplus(x) => acc(*x, g.zip(self.val(*x), |d, v| d * sigmoid(v))),
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut gx = y.zeros_like();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNormCols(x, inv_std) => {
                let (r, c) = (y.rows(), y.cols());
                let mut gx = y.zeros_like();
                for j in 0..c {
                    let mg = (0..r).map(|i| g.get(i, j)).sum::<f64>() / r as f64;
                    let mgy = (0..r).map(|i| g.get(i, j) * y.get(i, j)).sum::<f64>() / r as f64;
                    for i in 0..r {
                        gx.set(i, j, inv_std[j] * (g.get(i, j) - mg - y.get(i, j) * mgy));
                    }
                }
                acc(*x, gx);
            }
            Op::NormalizeCols(x, norms) => {
                let (r, c) = (y.rows(), y.cols());
                let mut gx = y.zeros_like();
                for j in 0..c {
                    let dot = (0..r).map(|i| g.get(i, j) * y.get(i, j)).sum::<f64>();
                    for i in 0..r {
                        gx.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norms[j]);
                    }
                }
                acc(*x, gx);
            }
            Op::Dropout(x, mask) => {
                let mut gx = g.clone();
                for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                acc(*x, gx);
            }
            Op::Mean(x) => {
                let tx = self.val(*x);
                acc(*x, tx.map(|_| g.data()[0] / tx.len() as f64));
            }
            Op::SumSquares(x) => {
                let s = g.data()[0];
                acc(*x, self.val(*x).map(|v| 2.0 * s * v));
            }
            Op::RowMean(x) => {
                let tx = self.val(*x);
                let c = tx.cols();
                let mut gx = tx.zeros_like();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i / c] / c as f64;
                }
                acc(*x, gx);
            }
            Op::RowSum(x) => {
                let tx = self.val(*x);
                let c = tx.cols();
                let mut gx = tx.zeros_like();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i / c];
                }
                acc(*x, gx);
            }
            Op::Im2Col(x, geo) => {
                let tx = self.val(*x);
                let mut gx = tx.zeros_like();
                let (ho, wo, k) = (geo.out_height(), geo.out_width(), geo.kernel);
                let ocols = ho * wo;
                for c in 0..geo.channels {
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = c * k * k + ki * k + kj;
                            for oy in 0..ho {
                                let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                                if iy < 0 || iy >= geo.height as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                                    if ix < 0 || ix >= geo.width as isize {
                                        continue;
                                    }
                                    gx.data_mut()[c * geo.height * geo.width + iy as usize * geo.width + ix as usize] +=
                                        g.data()[row * ocols + oy * wo + ox];
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::AvgPool2(x, height, width) => {
                let tx = self.val(*x);
                let (h2, w2) = (height / 2, width / 2);
                let mut gx = tx.zeros_like();
                let cols = tx.cols();
                for c in 0..tx.rows() {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            let d = 0.25 * g.get(c, yy * w2 + xx);
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gx.data_mut()[c * cols + (2 * yy + dy) * width + 2 * xx + dx] += d;
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.val(*q), self.val(*k), self.val(*v));
                let (d, n) = (tq.rows(), tq.cols());
                let (groups, heads) = (*groups, *heads);
                let len = n / groups;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = tq.zeros_like();
                let mut gk = tk.zeros_like();
                let mut gv = tv.zeros_like();
                let mut dp = vec![0.0; len];
                for gr in 0..groups {
                    for h in 0..heads {
                        let base = (gr * heads + h) * len * len;
                        for p in 0..len {
                            let cp = p * groups + gr;
                            let prow = &probs[base + p * len..base + (p + 1) * len];
                            for (pp, dpv) in dp.iter_mut().enumerate() {
                                let cpp = pp * groups + gr;
                                let mut a = 0.0;
                                for i in h * dh..(h + 1) * dh {
                                    let go = g.get(i, cp);
                                    a += go * tv.get(i, cpp);
                                    let cur = gv.get(i, cpp);
                                    gv.set(i, cpp, cur + prow[pp] * go);
                                }
                                *dpv = a;
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for pp in 0..len {
                                let ds = prow[pp] * (dp[pp] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let cpp = pp * groups + gr;
                                for i in h * dh..(h + 1) * dh {
                                    let a = gq.get(i, cp);
                                    gq.set(i, cp, a + ds * tk.get(i, cpp));
                                    let b = gk.get(i, cpp);
                                    gk.set(i, cpp, b + ds * tq.get(i, cp));
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::SpdInverse(x) => {
                // dA = -Y^T g Y^T, and Y is symmetric.
                let mut t = Tensor::zeros(y.rows(), y.cols());
                gemm(y, false, g, false, &mut t, 0.0);
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                gemm(&t, false, y, false, &mut gx, 0.0);
                gx.scale_assign(-1.0);
                acc(*x, gx);
            }
        }
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn row_sums(t: &Tensor) -> Tensor {
    Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect())
}

fn gather_cols(t: &Tensor, idx: &[usize]) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let n = idx.len();
    let mut out = Tensor::zeros(r, n);
    for i in 0..r {
        let src = &t.data()[i * c..(i + 1) * c];
        let dst = &mut out.data_mut()[i * n..(i + 1) * n];
        for (d, &j) in dst.iter_mut().zip(idx) {
            *d = src[j];
        }
    }
    out
}

fn scatter_cols(g: &Tensor, idx: &[usize], cols: usize) -> Tensor {
    let r = g.rows();
    let n = idx.len();
    let mut out = Tensor::zeros(r, cols);
    for i in 0..r {
        for (j, &dst) in idx.iter().enumerate() {
            out.data_mut()[i * cols + dst] += g.data()[i * n + j];
        }
    }
    out
}
