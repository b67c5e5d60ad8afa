//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends a node holding its output value; node ids are strictly
//! increasing, so a reverse sweep over the node list is a valid topological
//! order. Backward consumes the tape.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Unary, Var),
    AddRowBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: Var,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Upsample {
        x: Var,
        dims: [usize; 3],
        factor: usize,
    },
    Narrow {
        x: Var,
        offset: usize,
    },
    SliceCols {
        x: Var,
        cols: usize,
        start: usize,
    },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Focal {
        logits: Var,
        target: Vec<T>,
        alpha: i32,
        beta: i32,
        norm: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`] for every leaf that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// Parameter gradients in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(v).map(|g| (*id, g)))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn dims2(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn dims3(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match s {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::dim(op, format!("expected C×H×W, got {s:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        debug_assert!(
            !value.data().iter().any(|v| v.is_nan())
                || inputs
                    .iter()
                    .any(|i| self.nodes[i.0].value.data().iter().any(|v| v.is_nan())),
            "NaN produced from NaN-free inputs by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice in one
    /// pass returns the same variable, so shared weights accumulate one
    /// gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.bound.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.shape(a))?;
        let (n, k2) = dims2("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let out = kernels::transpose(r, c, self.value(a).data());
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), &[a]))
    }

    /// `x[n×c] + bias[c]` applied to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = dims2("add_row_bias", self.shape(x))?;
        if self.shape(bias) != [c] {
            return Err(Error::dim(
                "add_row_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x · w + b` with `w` stored as in×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    // ---- pointwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        same_shape("elementwise", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Max => {
                    if y > x {
                        y
                    } else {
                        x
                    }
                }
                Binary::Min => {
                    if y < x {
                        y
                    } else {
                        x
                    }
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(kind, a, b), &[a, b]))
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

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).data().iter().map(|&v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data: out }, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).data().iter().map(|&v| v + s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data: out }, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Gelu => gelu(x),
                Unary::Relu => x.max(T::zero()),
                Unary::Sigmoid => sigmoid(x),
                Unary::Exp => x.exp(),
                Unary::Ln => x.ln(),
                Unary::Abs => x.abs(),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data: out }, Op::Unary(kind, a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    // ---- normalization --------------------------------------------------

    /// Normalizes each row over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    shape,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let rows = xv.len() / c.max(1);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..len {
                    m = m.max(xv[at(k)]);
                }
                let mut s = T::zero();
                for k in 0..len {
                    let e = (xv[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                let inv = T::one() / s;
                for k in 0..len {
                    out[at(k)] *= inv;
                }
            }
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax { x, len, inner },
            &[x],
        ))
    }

    // ---- spatial ----------------------------------------------------------

    /// Grouped cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in/g×kh×kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = dims3("conv2d", self.shape(x))?;
        let (c_out, cin_g, kh, kw) = match self.shape(w) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::dim("conv2d", format!("kernel shape {s:?}"))),
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d groups {groups} must divide C_in {c_in} and C_out {c_out}"
            )));
        }
        if cin_g != c_in / groups {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {cin_g} input channels per group, input has {c_in}/{groups}"),
            ));
        }
        if kh % 2 == 0 && kh != stride || kw % 2 == 0 && kw != stride {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}×{kw} must be odd (or equal the stride for patchify)"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} stride {stride} on {h}×{wd} pad {pad}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::dim("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            groups,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::new(&[c_out, geom.oh, geom.ow], out)?,
            Op::Conv2d { x, w, b, geom },
            &inputs,
        ))
    }

    pub fn pool2d(
        &mut self,
        x: Var,
        kind: PoolKind,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c, h, w) = dims3("pool2d", self.shape(x))?;
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "pool2d",
                format!("kernel {k} stride {stride} pad {pad} on {h}×{w}"),
            ));
        }
        let geom = PoolGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let shape = [c, geom.oh, geom.ow];
        let xv = self.value(x).data();
        Ok(match kind {
            PoolKind::Max => {
                let (out, arg) = kernels::max_pool_forward(&geom, xv);
                self.push(Tensor::new(&shape, out)?, Op::MaxPool { x, arg }, &[x])
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool_forward(&geom, xv);
                self.push(Tensor::new(&shape, out)?, Op::AvgPool { x, geom }, &[x])
            }
        })
    }

    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = dims3("upsample_nearest2d", self.shape(x))?;
        if factor == 0 {
            return Err(Error::Usage("upsample factor must be ≥ 1".into()));
        }
        let out = kernels::upsample_nearest(c, h, w, factor, self.value(x).data());
        Ok(self.push(
            Tensor::new(&[c, h * factor, w * factor], out)?,
            Op::Upsample {
                x,
                dims: [c, h, w],
                factor,
            },
            &[x],
        ))
    }

    // ---- structural ---------------------------------------------------------

    /// Slice `[start, end)` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::dim(
                "narrow",
                format!("[{start}, {end}) of {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Narrow {
                x,
                offset: start * inner,
            },
            &[x],
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.shape(x))?;
        if start > end || end > c {
            return Err(Error::dim("slice_cols", format!("[{start}, {end}) of {c} columns")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for row in xv.chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(self.push(
            Tensor::new(&[r, end - start], out)?,
            Op::SliceCols { x, cols: c, start },
            &[x],
        ))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs trailing {:?}", s, tail),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), parts))
    }

    /// Concatenation of matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (r, _) = dims2("concat_cols", self.shape(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.shape(p))?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::new(&[r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::dim(
                "gather",
                format!("index {bad} of {} elements", xv.len()),
            ));
        }
        let data = idx.iter().map(|&i| xv[i]).collect();
        Ok(self.push(
            Tensor::new(&[idx.len()], data)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Penalty-reduced pixelwise focal loss on `sigmoid(logits)` against a
    /// Gaussian heatmap `target`; cells with target exactly 1 are positives.
    /// Normalized by the positive count (at least 1).
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>, alpha: i32, beta: i32) -> Result<Var> {
        same_shape("focal_loss", self.shape(logits), target.shape())?;
        let z = self.value(logits).data();
        let y = target.data();
        let npos = y.iter().filter(|&&v| v == T::one()).count().max(1);
        let norm = T::one() / T::lit(npos as f64);
        let mut total = T::zero();
        for (&zi, &yi) in z.iter().zip(y) {
            let (logp, log1mp) = (-softplus(-zi), -softplus(zi));
            let p = sigmoid(zi);
            total += if yi == T::one() {
                -(T::one() - p).powi(alpha) * logp
            } else {
                -(T::one() - yi).powi(beta) * p.powi(alpha) * log1mp
            };
        }
        Ok(self.push(
            Tensor::scalar(total * norm),
            Op::Focal {
                logits,
                target: y.to_vec(),
                alpha,
                beta,
                norm,
            },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------------

    /// Propagates d`loss` back through the record and returns gradients for
    /// every leaf that requires one. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                leaves.insert(Var(i), Tensor::new(node.value.shape(), g)?);
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.bound.into_iter().collect();
        params.sort();
        Ok(Gradients { leaves, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        // Lazily allocated accumulator for an input.
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, n: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        let n_of = |v: Var| self.nodes[v.0].value.numel();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if self.needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm_nt(m, n, k, g, val(*b), ga);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::gemm_tn(k, m, n, val(*a), g, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[0];
                if self.needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm_nn(m, n, k, g, val(*b), ga);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, n * k);
                    kernels::gemm_tn(n, m, k, g, val(*a), gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                let t = kernels::transpose(c, r, g);
                add_into(slot(grads, *a, r * c), &t);
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = g.len();
                if self.needs(*a) {
                    let ga = slot(grads, *a, n);
                    for i in 0..n {
                        ga[i] += match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bv[i],
                            Binary::Div => g[i] / bv[i],
                            Binary::Max => if bv[i] > av[i] { T::zero() } else { g[i] },
                            Binary::Min => if bv[i] < av[i] { T::zero() } else { g[i] },
                        };
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, n);
                    for i in 0..n {
                        gb[i] += match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av[i],
                            Binary::Div => -g[i] * av[i] / (bv[i] * bv[i]),
                            Binary::Max => if bv[i] > av[i] { g[i] } else { T::zero() },
                            Binary::Min => if bv[i] < av[i] { g[i] } else { T::zero() },
                        };
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * *s);
            }
            Op::AddScalar(a) | Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Unary(kind, a) => {
                let xv = val(*a);
                let yv = node.value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let x = xv[i];
                    let d = match kind {
                        Unary::Gelu => gelu_grad(x),
                        Unary::Relu => {
                            if x > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Sigmoid => yv[i] * (T::one() - yv[i]),
                        Unary::Exp => yv[i],
                        Unary::Ln => T::one() / x,
                        Unary::Abs => {
                            if x > T::zero() {
                                T::one()
                            } else if x < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::AddRowBias(x, b) => {
                let c = shp(*b)[0];
                if self.needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, c);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = shp(*gamma)[0];
                let gam = val(*gamma);
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, c);
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                }
                if self.needs(*x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    let gx = slot(grads, *x, g.len());
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let gh = grow[j] * gam[j];
                            m1 += gh;
                            m2 += gh * hrow[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let gh = grow[j] * gam[j];
                            gx[r * c + j] += inv_std[r] * (gh - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, len, inner } => {
                let y = node.value.data();
                let (len, inner) = (*len, *inner);
                let outer = y.len() / (len * inner).max(1);
                let gx = slot(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot += g[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut gx = self.needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); n_of(*x)]));
                let mut gw = self.needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); n_of(*w)]));
                let bneeds = b.filter(|b| self.needs(*b));
                let mut gb = bneeds.map(|b| grads[b.0].take().unwrap_or_else(|| vec![T::zero(); n_of(b)]));
                kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let (Some(b), Some(v)) = (bneeds, gb) {
                    grads[b.0] = Some(v);
                }
            }
            Op::MaxPool { x, arg } => {
                let gx = slot(grads, *x, n_of(*x));
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
            Op::AvgPool { x, geom } => {
                kernels::avg_pool_backward(geom, g, slot(grads, *x, n_of(*x)));
            }
            Op::Upsample { x, dims, factor } => {
                let [c, h, w] = *dims;
                kernels::upsample_nearest_backward(c, h, w, *factor, g, slot(grads, *x, n_of(*x)));
            }
            Op::Narrow { x, offset } => {
                let gx = slot(grads, *x, n_of(*x));
                add_into(&mut gx[*offset..*offset + g.len()], g);
            }
            Op::SliceCols { x, cols, start } => {
                let width = node.value.shape()[1];
                let gx = slot(grads, *x, n_of(*x));
                for (r, grow) in g.chunks(width).enumerate() {
                    add_into(&mut gx[r * cols + start..r * cols + start + width], grow);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = n_of(p);
                    if self.needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = shp(p)[1];
                    if self.needs(p) {
                        let gp = slot(grads, p, n_of(p));
                        for (r, grow) in g.chunks(total).enumerate() {
                            add_into(&mut gp[r * w..(r + 1) * w], &grow[col..col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Gather { x, idx } => {
                let gx = slot(grads, *x, n_of(*x));
                for (o, &i) in idx.iter().enumerate() {
                    gx[i] += g[o];
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, n_of(*x));
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Focal {
                logits,
                target,
                alpha,
                beta,
                norm,
            } => {
                let z = val(*logits);
                let gz = slot(grads, *logits, z.len());
                let a = T::lit(*alpha as f64);
                for i in 0..z.len() {
                    let p = sigmoid(z[i]);
                    let q = T::one() - p;
                    let d = if target[i] == T::one() {
                        a * p * q.powi(*alpha) * (-softplus(-z[i])) - q.powi(alpha + 1)
                    } else {
                        let wgt = (T::one() - target[i]).powi(*beta);
                        -wgt * (a * p.powi(*alpha) * q * (-softplus(z[i])) - p.powi(alpha + 1))
                    };
                    gz[i] += g[0] * *norm * d;
                }
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}
