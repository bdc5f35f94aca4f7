//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op is evaluated eagerly when it is added, so node indices are already
//! a topological order and the backward pass is a single reverse sweep.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable tensor in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Cross-channel Local Response Normalization parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Lrn {
        x: NodeId,
        params: LrnParams,
        scale: Vec<T>,
    },
    Softmax(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    GatherRows {
        x: NodeId,
        index: Vec<usize>,
    },
    Column {
        x: NodeId,
        col: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    Softplus(NodeId),
    Reshape(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::Lrn { .. } => "lrn",
            Op::Softmax(_) => "softmax",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::Column { .. } => "column",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softplus(_) => "softplus",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to bound parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, detail: String) -> Error {
    Error::InvalidShape { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Forward value at `root`. Ops are evaluated as they are added, so this
    /// only returns the cached result.
    pub fn forward(&self, root: NodeId) -> &Tensor<T> {
        self.value(root)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        id
    }

    /// A trainable leaf bound to parameter `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> NodeId {
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        node
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::from_f64(factor);
        let v = self.map(a, |x| x * f);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, f), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.value(a).data().as_ptr(),
                k as isize,
                1,
                self.value(b).data().as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.data_mut().as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Fully-connected layer: `x[N, in] * w[out, in]^T + b[out] -> [N, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(mismatch("linear", &sx, &sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("linear bias", &sw, &sb));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let bias = self.value(b).data();
        let mut data = Vec::with_capacity(n * dout);
        for _ in 0..n {
            data.extend_from_slice(bias);
        }
        unsafe {
            T::gemm(
                n,
                din,
                dout,
                T::one(),
                self.value(x).data().as_ptr(),
                din as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                din as isize,
                T::one(),
                data.as_mut_ptr(),
                dout as isize,
                1,
            );
        }
        let out = Tensor::new(vec![n, dout], data)?;
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// Cross-correlation of `x[N, C, H, W]` with `w[O, C, k, k]` plus bias `b[O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(mismatch("conv2d bias", &sw, self.shape(b)));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive".into()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(invalid(
                    "conv2d",
                    format!(
                        "output dims ({}, {}) from input {h}x{wd}, kernel {k}, stride {stride}, pad {pad}",
                        (h as isize + 2 * pad as isize - k as isize).div_euclid(stride as isize) + 1,
                        (wd as isize + 2 * pad as isize - k as isize).div_euclid(stride as isize) + 1,
                    ),
                ))
            }
        };
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); n * ckk * hw];
        let mut out = vec![T::zero(); n * o * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for i in 0..n {
            let col = &mut cols[i * ckk * hw..(i + 1) * ckk * hw];
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geo, col);
            let dst = &mut out[i * o * hw..(i + 1) * o * hw];
            for (oc, row) in dst.chunks_exact_mut(hw).enumerate() {
                row.fill(bv[oc]);
            }
            unsafe {
                T::gemm(
                    o,
                    ckk,
                    hw,
                    T::one(),
                    wv.as_ptr(),
                    ckk as isize,
                    1,
                    col.as_ptr(),
                    hw as isize,
                    1,
                    T::one(),
                    dst.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
        }
        let out = Tensor::new(vec![n, o, ho, wo], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Max pooling over `size x size` windows of `x[N, C, H, W]`, no padding.
    pub fn max_pool(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(invalid("maxpool", format!("expected rank 4, got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = match (
            conv_out_dim(h, size, stride.max(1), 0),
            conv_out_dim(w, size, stride.max(1), 0),
        ) {
            (Some(a), Some(b)) if stride > 0 && size > 0 => (a, b),
            _ => {
                return Err(invalid(
                    "maxpool",
                    format!("window {size} stride {stride} does not fit {h}x{w}"),
                ))
            }
        };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                let top = base + oy * stride * w;
                if size == 2 && stride == 2 {
                    let r0 = &xv[top..top + w];
                    let r1 = &xv[top + w..top + 2 * w];
                    for ox in 0..wo {
                        let j = 2 * ox;
                        let (mut bv, mut bi) = (r0[j], top + j);
                        if r0[j + 1] > bv {
                            (bv, bi) = (r0[j + 1], top + j + 1);
                        }
                        if r1[j] > bv {
                            (bv, bi) = (r1[j], top + w + j);
                        }
                        if r1[j + 1] > bv {
                            (bv, bi) = (r1[j + 1], top + w + j + 1);
                        }
                        out.push(bv);
                        argmax.push(bi as u32);
                    }
                    continue;
                }
                for ox in 0..wo {
                    let mut best = top + ox * stride;
                    for dy in 0..size {
                        let row = top + dy * w + ox * stride;
                        for idx in row..row + size {
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Cross-channel LRN on `x[N, C, ...]`:
    /// `y_c = x_c / (k + alpha/size * sum_{window(c)} x^2)^beta`.
    pub fn lrn(&mut self, x: NodeId, params: LrnParams) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(invalid("lrn", format!("no channel axis in {sx:?}")));
        }
        if params.size % 2 == 0 {
            return Err(invalid("lrn", format!("window size {} must be odd", params.size)));
        }
        let (n, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let xv = self.value(x).data();
        let half = (params.size - 1) / 2;
        let coef = T::from_f64(params.alpha / params.size as f64);
        let kk = T::from_f64(params.k);
        let sq: Vec<T> = xv.iter().map(|&v| v * v).collect();
        let mut scale = vec![T::zero(); xv.len()];
        let mut acc = vec![T::zero(); inner];
        for i in 0..n {
            let base = i * c * inner;
            let plane = |ch: usize| &sq[base + ch * inner..base + (ch + 1) * inner];
            acc.fill(T::zero());
            for ch in 0..=half.min(c - 1) {
                add_into(&mut acc, plane(ch));
            }
            for ch in 0..c {
                let dst = &mut scale[base + ch * inner..base + (ch + 1) * inner];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = kk + coef * a;
                }
                if ch + half + 1 < c {
                    add_into(&mut acc, plane(ch + half + 1));
                }
                if ch >= half {
                    sub_from(&mut acc, plane(ch - half));
                }
            }
        }
        let beta = params.beta;
        let out: Vec<T> = xv
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| v * pow_neg(s, beta))
            .collect();
        let out = Tensor::new(sx, out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Lrn { x, params, scale }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let width = *sa.last().expect("rank >= 1");
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(
            *inputs
                .first()
                .ok_or_else(|| invalid("concat", "no inputs".into()))?,
        )
        .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let block: usize = v.shape()[axis..].iter().product();
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Select rows of the leading axis (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if index.is_empty() {
            return Err(invalid("gather_rows", "empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= sx[0]) {
            return Err(invalid(
                "gather_rows",
                format!("row {bad} out of range for {sx:?}"),
            ));
        }
        let row: usize = sx[1..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            data.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = sx.clone();
        shape[0] = index.len();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Column `col` of a `[N, C]` matrix as a `[N]` vector.
    pub fn column(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || col >= sx[1] {
            return Err(invalid("column", format!("column {col} of {sx:?}")));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(sx[1])
            .map(|r| r[col])
            .collect();
        let out = Tensor::new(vec![sx[0]], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Column { x, col }, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// `ln(1 + e^x)` in the overflow-free form `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, softplus);
        let rg = self.rg(&[a]);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Error naming the earliest node feeding `root` whose value is NaN or
    /// infinite. Non-finite values propagate forward, so checking the root
    /// first keeps the common case to a single scan of one tensor.
    pub fn check_finite(&self, root: NodeId) -> Result<()> {
        if self.value(root).is_finite() {
            return Ok(());
        }
        let bad = (0..=root.0)
            .find(|&i| !self.nodes[i].value.is_finite())
            .unwrap_or(root.0);
        Err(Error::NonFinite {
            what: format!("{} (node {bad})", self.nodes[bad].op.name()),
        })
    }

    /// Gradients of the scalar `root` with respect to every bound parameter.
    /// A parameter bound more than once receives the sum of its contributions.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NotScalar {
                shape: rv.shape().to_vec(),
            });
        }
        self.check_finite(root)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));
        let mut out: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, gy, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        gy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut BTreeMap<ParamId, Tensor<T>>,
    ) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, g: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => match params.get_mut(pid) {
                Some(existing) => existing.add_assign(&gy),
                None => {
                    params.insert(*pid, gy);
                }
            },
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, gy.clone());
                }
                if needs(*b) {
                    acc(*b, gy);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, gy.clone());
                }
                if needs(*b) {
                    acc(*b, scaled(&gy, -T::one()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, hadamard(&gy, self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, hadamard(&gy, self.value(*a)));
                }
            }
            Op::Scale(a, f) => acc(*a, scaled(&gy, *f)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if needs(*a) {
                    // dA = dY * B^T
                    let mut da = Tensor::zeros(vec![m, k]);
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gy.data().as_ptr(),
                            n as isize,
                            1,
                            vb.data().as_ptr(),
                            1,
                            n as isize,
                            T::zero(),
                            da.data_mut().as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    acc(*a, da);
                }
                if needs(*b) {
                    // dB = A^T * dY
                    let mut db = Tensor::zeros(vec![k, n]);
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            va.data().as_ptr(),
                            1,
                            k as isize,
                            gy.data().as_ptr(),
                            n as isize,
                            1,
                            T::zero(),
                            db.data_mut().as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if needs(*x) {
                    let mut dx = Tensor::zeros(vec![n, din]);
                    unsafe {
                        T::gemm(
                            n,
                            dout,
                            din,
                            T::one(),
                            gy.data().as_ptr(),
                            dout as isize,
                            1,
                            vw.data().as_ptr(),
                            din as isize,
                            1,
                            T::zero(),
                            dx.data_mut().as_mut_ptr(),
                            din as isize,
                            1,
                        );
                    }
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = Tensor::zeros(vec![dout, din]);
                    unsafe {
                        T::gemm(
                            dout,
                            n,
                            din,
                            T::one(),
                            gy.data().as_ptr(),
                            1,
                            dout as isize,
                            vx.data().as_ptr(),
                            din as isize,
                            1,
                            T::zero(),
                            dw.data_mut().as_mut_ptr(),
                            din as isize,
                            1,
                        );
                    }
                    acc(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); dout];
                    for row in gy.data().chunks_exact(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    acc(*b, Tensor::new(vec![dout], db)?);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let data = gy
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*a, Tensor::new(gy.shape().to_vec(), data)?);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let sx = vx.shape();
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (vw.shape()[0], vw.shape()[2]);
                let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
                let geo = ConvGeom {
                    c,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *pad,
                    ho,
                    wo,
                };
                let ckk = c * k * k;
                let hw = ho * wo;
                let g = gy.data();
                if needs(*w) {
                    let mut dw = Tensor::zeros(vw.shape().to_vec());
                    for i in 0..n {
                        unsafe {
                            T::gemm(
                                o,
                                hw,
                                ckk,
                                T::one(),
                                g[i * o * hw..].as_ptr(),
                                hw as isize,
                                1,
                                cols[i * ckk * hw..].as_ptr(),
                                1,
                                hw as isize,
                                T::one(),
                                dw.data_mut().as_mut_ptr(),
                                ckk as isize,
                                1,
                            );
                        }
                    }
                    acc(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for i in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let row = &g[(i * o + oc) * hw..(i * o + oc + 1) * hw];
                            *d = *d + row.iter().copied().sum::<T>();
                        }
                    }
                    acc(*b, Tensor::new(vec![o], db)?);
                }
                if needs(*x) {
                    let mut dx = Tensor::zeros(sx.to_vec());
                    let mut dcol = vec![T::zero(); ckk * hw];
                    for i in 0..n {
                        unsafe {
                            T::gemm(
                                ckk,
                                o,
                                hw,
                                T::one(),
                                vw.data().as_ptr(),
                                1,
                                ckk as isize,
                                g[i * o * hw..].as_ptr(),
                                hw as isize,
                                1,
                                T::zero(),
                                dcol.as_mut_ptr(),
                                hw as isize,
                                1,
                            );
                        }
                        col2im(
                            &dcol,
                            &geo,
                            &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd],
                        );
                    }
                    acc(*x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let d = dx.data_mut();
                for (&g, &j) in gy.data().iter().zip(argmax) {
                    d[j as usize] = d[j as usize] + g;
                }
                acc(*x, dx);
            }
            Op::Lrn { x, params, scale } => {
                let vx = self.value(*x);
                let sx = vx.shape();
                let (n, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let half = (params.size - 1) / 2;
                let xs = vx.data();
                let g = gy.data();
                let beta = params.beta;
                let cross = T::from_f64(2.0 * params.alpha * beta / params.size as f64);
                // t_j = g_j * x_j * scale_j^(-beta-1)
                let mut t = vec![T::zero(); xs.len()];
                let mut dx = vec![T::zero(); xs.len()];
                for idx in 0..xs.len() {
                    let p = pow_neg(scale[idx], beta);
                    dx[idx] = g[idx] * p;
                    t[idx] = g[idx] * xs[idx] * p / scale[idx];
                }
                let mut win = vec![T::zero(); inner];
                for i in 0..n {
                    let base = i * c * inner;
                    let plane = |ch: usize| &t[base + ch * inner..base + (ch + 1) * inner];
                    win.fill(T::zero());
                    for ch in 0..=half.min(c - 1) {
                        add_into(&mut win, plane(ch));
                    }
                    for ch in 0..c {
                        let lo = base + ch * inner;
                        for ((d, &xv), &w) in dx[lo..lo + inner].iter_mut().zip(&xs[lo..lo + inner]).zip(&win) {
                            *d = *d - cross * xv * w;
                        }
                        if ch + half + 1 < c {
                            add_into(&mut win, plane(ch + half + 1));
                        }
                        if ch >= half {
                            sub_from(&mut win, plane(ch - half));
                        }
                    }
                }
                acc(*x, Tensor::new(sx.to_vec(), dx)?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let width = *y.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(width).zip(gy.data().chunks_exact(width)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = gy.shape()[..*axis].iter().product();
                let out_block: usize = gy.shape()[*axis..].iter().product();
                let mut offset = 0;
                for &id in inputs {
                    let s = self.shape(id);
                    let block: usize = s[*axis..].iter().product();
                    if needs(id) {
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * out_block + offset;
                            data.extend_from_slice(&gy.data()[start..start + block]);
                        }
                        acc(id, Tensor::new(s.to_vec(), data)?);
                    }
                    offset += block;
                }
            }
            Op::GatherRows { x, index } => {
                let sx = self.shape(*x).to_vec();
                let row: usize = sx[1..].iter().product();
                let mut dx = Tensor::zeros(sx);
                let d = dx.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    let src = &gy.data()[r * row..(r + 1) * row];
                    for (dv, &g) in d[i * row..(i + 1) * row].iter_mut().zip(src) {
                        *dv = *dv + g;
                    }
                }
                acc(*x, dx);
            }
            Op::Column { x, col } => {
                let sx = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(sx.clone());
                for (r, &g) in gy.data().iter().enumerate() {
                    dx.data_mut()[r * sx[1] + col] = g;
                }
                acc(*x, dx);
            }
            Op::Sum(a) => {
                let g = gy.item();
                acc(*a, Tensor::full(self.shape(*a).to_vec(), g));
            }
            Op::Mean(a) => {
                let s = self.shape(*a).to_vec();
                let count: usize = s.iter().product();
                let g = gy.item() / T::from_f64(count as f64);
                acc(*a, Tensor::full(s, g));
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                let data = gy
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&g, &x)| g * sigmoid(x))
                    .collect();
                acc(*a, Tensor::new(va.shape().to_vec(), data)?);
            }
            Op::Reshape(a) => {
                acc(*a, gy.reshape(self.shape(*a).to_vec())?);
            }
        }
        Ok(())
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `s^(-beta)`, with a sqrt-only path for the common `beta = 0.75`.
fn pow_neg<T: Scalar>(s: T, beta: f64) -> T {
    if beta == 0.75 {
        let r = s.sqrt();
        T::one() / (r * r.sqrt())
    } else if beta == 0.0 {
        T::one()
    } else {
        s.powf(T::from_f64(-beta))
    }
}

fn scaled<T: Scalar>(t: &Tensor<T>, f: T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * f).collect())
        .expect("same shape")
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
    .expect("same shape")
}

/// `floor((size + 2 pad - k) / stride) + 1` when positive.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < g.wo && (lo * g.stride + kx) < g.pad {
        lo += 1;
    }
    let mut hi = g.wo;
    while hi > lo && (hi - 1) * g.stride + kx >= g.pad + g.w {
        hi -= 1;
    }
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ch * g.k + ky) * g.k + kx;
                let dst = &mut col[r * hw..(r + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..(ch * g.h + iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (j, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ch * g.k + ky) * g.k + kx;
                let src = &col[r * hw..(r + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + iy as usize) * g.w + first;
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        add_into(&mut dx[base..base + s.len()], s);
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            let at = base + j * g.stride;
                            dx[at] = dx[at] + v;
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &b) in acc.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn sub_from<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &b) in acc.iter_mut().zip(src) {
        *a = *a - b;
    }
}
