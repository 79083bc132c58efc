//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] borrows the model's [`ParamStore`] for the duration of one
//! forward pass. Every operation appends a node holding its output; calling
//! [`Graph::backward`] replays the tape in reverse and returns the gradient
//! of a scalar loss with respect to every reachable parameter (and every
//! leaf created with [`Graph::input_with_grad`]).

use super::conv::{conv_backward, conv_forward, ConvGeometry};
use super::{gemm, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Affine(Var, T),
    MulConst(Var, Vec<T>),
    ScaleRows(Var, Vec<T>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat1(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        batch: usize,
    },
    SumDepth(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Film {
        z: Var,
        gamma: Var,
        beta: Var,
        per_channel: bool,
    },
    GlobalAvgPool(Var),
    LogSoftmax(Var),
    PickCols(Var, Vec<usize>),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: Vec<(Var, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient w.r.t. a leaf created by [`Graph::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g.as_slice())
    }
}

pub struct Graph<'s, T: Real = f32> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::config(format!("{op}: {detail}"))
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, op, &[a, b])
    }

    fn map(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Var {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_map(Op::Minimum(a, b), a, b, |x, y| if y < x { y } else { x }))
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: T, offset: T) -> Var {
        self.map(Op::Affine(a, scale), a, |x| scale * x + offset)
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(shape_err("mul_const", format!("constant has {} elements", c.len())));
        }
        let data = self.data(a).iter().zip(c).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        Ok(self.push(t, Op::MulConst(a, c.to_vec()), &[a]))
    }

    /// Scales row `i` of a 2-D tensor by the constant `scales[i]`.
    pub fn scale_rows(&mut self, a: Var, scales: &[T]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != scales.len() {
            return Err(shape_err("scale_rows", format!("{shape:?} vs {} scales", scales.len())));
        }
        let cols = shape[1];
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| *x * scales[i / cols])
            .collect();
        let t = Tensor::new(shape, data).expect("same shape");
        Ok(self.push(t, Op::ScaleRows(a, scales.to_vec()), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(Op::Relu(a), a, |x| x.max(T::zero()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(Op::Sigmoid(a), a, |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(Op::Tanh(a), a, |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(Op::Exp(a), a, |x| x.exp())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(Op::Square(a), a, |x| x * x)
    }

    /// Clamp into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.map(Op::Clamp(a, lo, hi), a, |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel().max(1)).expect("count");
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Flattens everything after the leading batch axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(a, vec![n, rest])
    }

    /// Concatenation along axis 1. All other axes must agree.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat1", format!("rank of {first:?} below 2")));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(shape_err("concat1", format!("{s:?} incompatible with {first:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for p in parts {
                let block = self.shape(*p)[1] * inner;
                data.extend_from_slice(&self.data(*p)[i * block..(i + 1) * block]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let t = Tensor::new(shape, data).expect("concat sizes");
        Ok(self.push(t, Op::Concat1(parts.to_vec()), parts))
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(shape_err("slice_cols", format!("{shape:?} [{start}, +{len})")));
        }
        let cols = shape[1];
        let src = self.data(a);
        let mut data = Vec::with_capacity(shape[0] * len);
        for r in 0..shape[0] {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![shape[0], len], data).expect("slice sizes");
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// Row gather from a 2-D tensor (also serves as embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || rows.iter().any(|r| *r >= shape[0]) {
            return Err(shape_err("gather_rows", format!("{shape:?} rows {rows:?}")));
        }
        let cols = shape[1];
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(vec![rows.len(), cols], data).expect("gather sizes");
        Ok(self.push(t, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    /// Stacks 2-D tensors along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err("concat_rows", format!("{s:?} vs {cols} columns")));
            }
            rows += s[0];
            data.extend_from_slice(self.data(*p));
        }
        let t = Tensor::new(vec![rows, cols], data).expect("row sizes");
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `x·wᵀ + b` with `x: B×In`, `w: Out×In`, `b: Out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut data = vec![T::zero(); batch * out];
        for row in data.chunks_mut(out) {
            row.copy_from_slice(self.data(b));
        }
        gemm(batch, inp, out, self.data(x), false, self.data(w), true, &mut data, true);
        let t = Tensor::new(vec![batch, out], data).expect("linear sizes");
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// 2-D convolution over `N×C×H×W` with a `O×C×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        let geom = ConvGeometry {
            in_channels: xs[1],
            out_channels: ws[0],
            depth: 1,
            height: xs[2],
            width: xs[3],
            kernel_depth: 1,
            kernel: ws[2],
            stride_depth: 1,
            stride,
            pad_depth: 0,
            pad,
        };
        let out = self.conv_common("conv2d", x, w, b, geom, ws[1])?;
        let (n, o) = (xs[0], ws[0]);
        let t = Tensor::new(vec![n, o, geom.out_height(), geom.out_width()], out).expect("conv sizes");
        Ok(self.push(t, Op::Conv { x, w, b, geom, batch: n }, &[x, w, b]))
    }

    /// 3-D convolution over `N×C×D×H×W` with a `O×C×kd×k×k` kernel; depth
    /// uses unit stride and the given depth padding.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        pad_depth: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[3] != ws[4] {
            return Err(shape_err("conv3d", format!("input {xs:?}, weight {ws:?}")));
        }
        let geom = ConvGeometry {
            in_channels: xs[1],
            out_channels: ws[0],
            depth: xs[2],
            height: xs[3],
            width: xs[4],
            kernel_depth: ws[2],
            kernel: ws[3],
            stride_depth: 1,
            stride,
            pad_depth,
            pad,
        };
        if ws[2] > xs[2] + 2 * pad_depth {
            return Err(shape_err("conv3d", format!("kernel depth {} exceeds padded input", ws[2])));
        }
        let out = self.conv_common("conv3d", x, w, b, geom, ws[1])?;
        let shape = vec![xs[0], ws[0], geom.out_depth(), geom.out_height(), geom.out_width()];
        let t = Tensor::new(shape, out).expect("conv sizes");
        Ok(self.push(t, Op::Conv { x, w, b, geom, batch: xs[0] }, &[x, w, b]))
    }

    fn conv_common(
        &self,
        op: &str,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        weight_in: usize,
    ) -> Result<Vec<T>> {
        if weight_in != geom.in_channels {
            return Err(shape_err(
                op,
                format!("input has {} channels, weight expects {weight_in}", geom.in_channels),
            ));
        }
        if self.shape(b) != [geom.out_channels] {
            return Err(shape_err(op, format!("bias shape {:?}", self.shape(b))));
        }
        if geom.kernel > geom.height + 2 * geom.pad || geom.kernel > geom.width + 2 * geom.pad {
            return Err(shape_err(op, format!("kernel {} exceeds padded input", geom.kernel)));
        }
        if geom.stride == 0 {
            return Err(shape_err(op, "stride must be positive".into()));
        }
        let batch = self.shape(x)[0];
        Ok(conv_forward(&geom, batch, self.data(x), self.data(w), self.data(b)))
    }

    /// Sums a `N×C×D×H×W` tensor over its depth axis.
    pub fn sum_depth(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(shape_err("sum_depth", format!("{s:?} is not rank 5")));
        }
        let plane = s[3] * s[4];
        let src = self.data(x);
        let mut data = vec![T::zero(); s[0] * s[1] * plane];
        for nc in 0..s[0] * s[1] {
            let dst = &mut data[nc * plane..(nc + 1) * plane];
            for z in 0..s[2] {
                let off = (nc * s[2] + z) * plane;
                for (d, v) in dst.iter_mut().zip(&src[off..off + plane]) {
                    *d += *v;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], s[3], s[4]], data).expect("sum sizes");
        Ok(self.push(t, Op::SumDepth(x), &[x]))
    }

    /// Group normalization over `N×C×…` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(shape_err("group_norm", format!("{s:?} with {groups} groups")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", "affine parameters must be per-channel".into()));
        }
        let spatial: usize = s[2..].iter().product();
        let cg = c / groups;
        let m = T::from_usize(cg * spatial).expect("count");
        let eps = T::from_f64_lossy(NORM_EPS);
        let (src, gv, bv) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); src.len()];
        let mut stats = Vec::with_capacity(s[0] * groups);
        for n in 0..s[0] {
            for g in 0..groups {
                let off = (n * c + g * cg) * spatial;
                let block = &src[off..off + cg * spatial];
                let mean = block.iter().copied().sum::<T>() / m;
                let var = block.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / m;
                let rstd = T::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let o = off + ci * spatial;
                    for i in o..o + spatial {
                        out[i] = ga * (src[i] - mean) * rstd + be;
                    }
                }
            }
        }
        let t = Tensor::new(s, out).expect("norm sizes");
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta]))
    }

    /// Feature-wise affine transform `gamma ⊙ z + beta`.
    ///
    /// `gamma`/`beta` either match `z` (`N×C×H×W`) or are `N×C` and broadcast
    /// over the spatial axes.
    pub fn film(&mut self, z: Var, gamma: Var, beta: Var) -> Result<Var> {
        let zs = self.shape(z).to_vec();
        let (gs, bs) = (self.shape(gamma).to_vec(), self.shape(beta).to_vec());
        if zs.len() != 4 || gs != bs {
            return Err(shape_err("film", format!("z {zs:?}, gamma {gs:?}, beta {bs:?}")));
        }
        let per_channel = if gs == zs {
            false
        } else if gs == zs[..2] {
            true
        } else {
            return Err(shape_err("film", format!("factors {gs:?} do not fit {zs:?}")));
        };
        let spatial = zs[2] * zs[3];
        let (zv, gv, bv) = (self.data(z), self.data(gamma), self.data(beta));
        let data = zv
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let j = if per_channel { i / spatial } else { i };
                gv[j] * *v + bv[j]
            })
            .collect();
        let t = Tensor::new(zs, data).expect("film sizes");
        Ok(self.push(t, Op::Film { z, gamma, beta, per_channel }, &[z, gamma, beta]))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("{s:?} is not rank 4")));
        }
        let spatial = s[2] * s[3];
        let denom = T::from_usize(spatial).expect("count");
        let data = self
            .data(x)
            .chunks(spatial)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], data).expect("pool sizes");
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("log_softmax", format!("{s:?} is not rank 2")));
        }
        let mut data = Vec::with_capacity(s[0] * s[1]);
        for row in self.data(x).chunks(s[1]) {
            data.extend(log_softmax_row(row));
        }
        let t = Tensor::new(s, data).expect("softmax sizes");
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    /// Selects `x[i, cols[i]]` from a 2-D tensor, giving a vector.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != cols.len() || cols.iter().any(|c| *c >= s[1]) {
            return Err(shape_err("pick_cols", format!("{s:?} with {cols:?}")));
        }
        let src = self.data(x);
        let data = cols.iter().enumerate().map(|(i, c)| src[i * s[1] + c]).collect();
        let t = Tensor::new(vec![s[0]], data).expect("pick sizes");
        Ok(self.push(t, Op::PickCols(x, cols.to_vec()), &[x]))
    }

    /// Which side of its non-smooth points every relu, clamp, and minimum
    /// landed on. Two evaluations with equal patterns lie on one smooth piece
    /// of the recorded function.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.data(*a).iter().map(|x| u8::from(*x > T::zero()))),
                Op::Clamp(a, lo, hi) => out.extend(self.data(*a).iter().map(|x| u8::from(x > lo) + u8::from(x > hi))),
                Op::Minimum(a, b) => out.extend(self.data(*a).iter().zip(self.data(*b)).map(|(x, y)| u8::from(y < x))),
                _ => {}
            }
        }
        out
    }

    /// Replays the tape from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: Vec::new(),
            leaves: Vec::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let y = self.nodes[i].value_ref(self.store);
        match &self.nodes[i].op {
            Op::Leaf => out.leaves.push((Var(i), g)),
            Op::Param(id) => match out.params.iter_mut().find(|(p, _)| p == id) {
                Some((_, acc)) => add_into(acc, &g),
                None => out.params.push((*id, g)),
            },
            Op::Add(a, b) => {
                self.send(grads, *a, |d| add_into(d, &g));
                self.send(grads, *b, |d| add_into(d, &g));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, |d| add_into(d, &g));
                self.send(grads, *b, |d| {
                    for (d, g) in d.iter_mut().zip(&g) {
                        *d -= *g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.send(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(bv) {
                        *d += *g * *y;
                    }
                });
                self.send(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(&g).zip(av) {
                        *d += *g * *x;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.send(grads, *a, |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        if !(bv[k] < av[k]) {
                            *d += g[k];
                        }
                    }
                });
                self.send(grads, *b, |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        if bv[k] < av[k] {
                            *d += g[k];
                        }
                    }
                });
            }
            Op::Affine(a, scale) => self.send(grads, *a, |d| {
                for (d, g) in d.iter_mut().zip(&g) {
                    *d += *g * *scale;
                }
            }),
            Op::MulConst(a, c) => self.send(grads, *a, |d| {
                for ((d, g), c) in d.iter_mut().zip(&g).zip(c) {
                    *d += *g * *c;
                }
            }),
            Op::ScaleRows(a, scales) => {
                let cols = self.shape(*a)[1];
                self.send(grads, *a, |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        *d += g[k] * scales[k / cols];
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.send(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                        if *x > T::zero() {
                            *d += *g;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.send(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(&g).zip(y.data()) {
                    *d += *g * *y * (T::one() - *y);
                }
            }),
            Op::Tanh(a) => self.send(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(&g).zip(y.data()) {
                    *d += *g * (T::one() - *y * *y);
                }
            }),
            Op::Exp(a) => self.send(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(&g).zip(y.data()) {
                    *d += *g * *y;
                }
            }),
            Op::Square(a) => {
                let x = self.data(*a);
                let two = T::one() + T::one();
                self.send(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                        *d += two * *g * *x;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                self.send(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                        if *x > *lo && *x < *hi {
                            *d += *g;
                        }
                    }
                });
            }
            Op::Sum(a) => self.send(grads, *a, |d| {
                for d in d.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel().max(1)).expect("count");
                self.send(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::Reshape(a) => self.send(grads, *a, |d| add_into(d, &g)),
            Op::Concat1(parts) => {
                let n = y.shape()[0];
                let inner: usize = y.shape()[2..].iter().product();
                let total = y.shape()[1] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = self.shape(*p)[1] * inner;
                    self.send(grads, *p, |d| {
                        for r in 0..n {
                            add_into(
                                &mut d[r * block..(r + 1) * block],
                                &g[r * total + offset..r * total + offset + block],
                            );
                        }
                    });
                    offset += block;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.shape(*a)[1];
                let len = y.shape()[1];
                self.send(grads, *a, |d| {
                    for r in 0..y.shape()[0] {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let cols = self.shape(*a)[1];
                self.send(grads, *a, |d| {
                    for (k, r) in rows.iter().enumerate() {
                        add_into(&mut d[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.send(grads, *p, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_dim = self.shape(*w)[0];
                let (xv, wv) = (self.data(*x), self.data(*w));
                self.send(grads, *x, |d| gemm(batch, out_dim, inp, &g, false, wv, false, d, true));
                self.send(grads, *w, |d| gemm(out_dim, batch, inp, &g, true, xv, false, d, true));
                self.send(grads, *b, |d| {
                    for row in g.chunks(out_dim) {
                        add_into(d, row);
                    }
                });
            }
            Op::Conv { x, w, b, geom, batch } => {
                let (di, dw, db) = conv_backward(
                    geom,
                    *batch,
                    self.data(*x),
                    self.data(*w),
                    &g,
                    self.needs(*x),
                );
                if let Some(di) = di {
                    self.send(grads, *x, |d| add_into(d, &di));
                }
                self.send(grads, *w, |d| add_into(d, &dw));
                self.send(grads, *b, |d| add_into(d, &db));
            }
            Op::SumDepth(x) => {
                let s = self.shape(*x).to_vec();
                let plane = s[3] * s[4];
                self.send(grads, *x, |d| {
                    for nc in 0..s[0] * s[1] {
                        for z in 0..s[2] {
                            let off = (nc * s[2] + z) * plane;
                            add_into(&mut d[off..off + plane], &g[nc * plane..(nc + 1) * plane]);
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, stats, &g, grads),
            Op::Film {
                z,
                gamma,
                beta,
                per_channel,
            } => {
                let s = self.shape(*z).to_vec();
                let spatial = s[2] * s[3];
                let (zv, gv) = (self.data(*z), self.data(*gamma));
                let idx = |k: usize| if *per_channel { k / spatial } else { k };
                self.send(grads, *z, |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        *d += g[k] * gv[idx(k)];
                    }
                });
                self.send(grads, *gamma, |d| {
                    for (k, zk) in zv.iter().enumerate() {
                        d[idx(k)] += g[k] * *zk;
                    }
                });
                self.send(grads, *beta, |d| {
                    for (k, gk) in g.iter().enumerate() {
                        d[idx(k)] += *gk;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let spatial = s[2] * s[3];
                let denom = T::from_usize(spatial).expect("count");
                self.send(grads, *x, |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        *d += g[k / spatial] / denom;
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = y.shape()[1];
                self.send(grads, *x, |d| {
                    for ((drow, grow), yrow) in
                        d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols))
                    {
                        let total: T = grow.iter().copied().sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += *g - y.exp() * total;
                        }
                    }
                });
            }
            Op::PickCols(x, cols) => {
                let width = self.shape(*x)[1];
                self.send(grads, *x, |d| {
                    for (r, c) in cols.iter().enumerate() {
                        d[r * width + c] += g[r];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(T, T)],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let s = self.shape(x).to_vec();
        let c = s[1];
        let spatial: usize = s[2..].iter().product();
        let cg = c / groups;
        let m = T::from_usize(cg * spatial).expect("count");
        let (xv, gv) = (self.data(x), self.data(gamma));
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = self.needs(x).then(|| vec![T::zero(); xv.len()]);
        for n in 0..s[0] {
            for grp in 0..groups {
                let (mean, rstd) = stats[n * groups + grp];
                let off = (n * c + grp * cg) * spatial;
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ci in 0..cg {
                    let ch = grp * cg + ci;
                    let o = off + ci * spatial;
                    for k in o..o + spatial {
                        let xhat = (xv[k] - mean) * rstd;
                        dgamma[ch] += g[k] * xhat;
                        dbeta[ch] += g[k];
                        let dxhat = g[k] * gv[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    for ci in 0..cg {
                        let ch = grp * cg + ci;
                        let o = off + ci * spatial;
                        for k in o..o + spatial {
                            let xhat = (xv[k] - mean) * rstd;
                            let dxhat = g[k] * gv[ch];
                            dx[k] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            self.send(grads, x, |d| add_into(d, &dx));
        }
        self.send(grads, gamma, |d| add_into(d, &dgamma));
        self.send(grads, beta, |d| add_into(d, &dbeta));
    }

    /// Accumulates into the gradient buffer of `v` when it needs one.
    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let len = self.value(v).numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }
}

impl<T: Real> Node<T> {
    fn value_ref<'a>(&'a self, store: &'a ParamStore<T>) -> &'a Tensor<T> {
        match &self.value {
            Value::Owned(t) => t,
            Value::Param(id) => store.value(*id),
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|v| *v - lse).collect()
}
