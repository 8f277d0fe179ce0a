//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward pass as an append-only sequence of nodes;
//! [`Tape::backward`] replays it in reverse append order exactly once and
//! populates gradient buffers. Tapes are per-forward-pass and are discarded
//! afterwards; model parameters live outside the tape and are leased in as
//! leaves each pass.
//!
//! All buffers are 64-bit floats. Elementwise binary ops require identical
//! shapes except for scalar-tensor combinations; everything else errors with
//! the offending dimension named.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Sparse support pattern for [`Tape::graph_conv`]: `(row, col)` entries, one
/// packed weight per entry per channel pair.
pub type SparsePattern = Arc<Vec<(usize, usize)>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { axis: usize, parts: Vec<Var> },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: (usize, usize, usize, usize) },
    ConvTransposeRow { x: Var, w: Var, b: Option<Var> },
    LinearMap { w: Var, x: Var, b: Option<Var> },
    GraphConv { x: Var, w: Var, pattern: SparsePattern },
    BroadcastChannel { v: Var },
    ChannelMean { x: Var },
    BroadcastBatch { v: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTransposeRow { .. } => "conv_transpose_row",
            Op::LinearMap { .. } => "linear_map",
            Op::GraphConv { .. } => "graph_conv",
            Op::BroadcastChannel { .. } => "broadcast_channel",
            Op::ChannelMean { .. } => "channel_mean",
            Op::BroadcastBatch { .. } => "broadcast_batch",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input value (parameter or data) as a leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer populated by [`Tape::backward`]; `None` when the node
    /// was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        // Scalar-tensor is the only supported broadcast.
        if self.value(a).len() == 1 {
            return Ok(sb.to_vec());
        }
        if self.value(b).len() == 1 {
            return Ok(sa.to_vec());
        }
        Err(shape_err(op, format!("operand shapes {:?} vs {:?}", sa, sb)))
    }

    fn elementwise2(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shapes(opname, a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let n = shape.iter().product::<usize>();
        let mut out = Vec::with_capacity(n);
        if da.len() == db.len() {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else if da.len() == 1 {
            let x = da[0];
            out.extend(db.iter().map(|&y| f(x, y)));
        } else {
            let y = db[0];
            out.extend(da.iter().map(|&x| f(x, y)));
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("hadamard", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::from_vec(&self.shape(a).to_vec(), data).unwrap();
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let value = Tensor::from_vec(&self.shape(a).to_vec(), data).unwrap();
        self.push(value, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_vec(&self.shape(a).to_vec(), data).unwrap();
        self.push(value, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(a))
    }

    // ---- shape manipulation ----------------------------------------------

    /// Reinterprets the buffer row-major under a new shape of equal volume.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape).map_err(|_| {
            shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(a), shape),
            )
        })?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a);
        if sh.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D, got {:?}", sh)));
        }
        let (m, n) = (sh[0], sh[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts".into()));
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {} out of rank {}", axis, base.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != base.len() {
                return Err(shape_err("concat", format!("rank mismatch {:?} vs {:?}", sh, base)));
            }
            for (d, (&a, &b)) in sh.iter().zip(&base).enumerate() {
                if d != axis && a != b {
                    return Err(shape_err(
                        "concat",
                        format!("dim {} mismatch: {} vs {}", d, a, b),
                    ));
                }
            }
            axis_total += sh[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let row = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let block = pa * inner;
            let src = self.value(p).data();
            for o in 0..outer {
                out[o * row + offset..o * row + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Concat { axis, parts: parts.to_vec() }))
    }

    /// Contiguous slice of length `len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() {
            return Err(shape_err("slice", format!("axis {} out of rank {}", axis, sh.len())));
        }
        if start + len > sh[axis] {
            return Err(shape_err(
                "slice",
                format!("range {}..{} exceeds extent {} on axis {}", start, start + len, sh[axis], axis),
            ));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let row = sh[axis] * inner;
        let mut shape = sh.clone();
        shape[axis] = len;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[o * row + start * inner..o * row + (start + len) * inner]);
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("expected 2-D operands, got {:?} x {:?}", sa, sb)));
        }
        if sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {} vs {}", sa[1], sb[0]),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = da[i * k + l];
                let brow = &db[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    // ---- broadcasts over batch/channel axes ------------------------------

    /// Tiles a `[C]` vector over a `[B,C,..]` shape (channel axis 1).
    pub fn broadcast_channel(&mut self, v: Var, like: &[usize]) -> Result<Var> {
        let c = self.value(v).len();
        if like.len() < 2 || like[1] != c {
            return Err(shape_err(
                "broadcast_channel",
                format!("vector of {} channels vs target shape {:?}", c, like),
            ));
        }
        let inner: usize = like[2..].iter().product();
        let batch = like[0];
        let src = self.value(v).data().to_vec();
        let mut out = vec![0.0; batch * c * inner];
        for b in 0..batch {
            for (ci, &val) in src.iter().enumerate() {
                let base = (b * c + ci) * inner;
                out[base..base + inner].fill(val);
            }
        }
        let value = Tensor::from_vec(like, out)?;
        Ok(self.push(value, Op::BroadcastChannel { v }))
    }

    /// Per-channel mean over batch and spatial axes: `[B,C,..] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() < 2 {
            return Err(shape_err("channel_mean", format!("expected rank >= 2, got {:?}", sh)));
        }
        let (batch, c) = (sh[0], sh[1]);
        let inner: usize = sh[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for b in 0..batch {
            for ci in 0..c {
                let base = (b * c + ci) * inner;
                out[ci] += src[base..base + inner].iter().sum::<f64>();
            }
        }
        let count = (batch * inner) as f64;
        for v in &mut out {
            *v /= count;
        }
        let value = Tensor::from_vec(&[c], out)?;
        Ok(self.push(value, Op::ChannelMean { x }))
    }

    /// Tiles a tensor over a new leading batch axis.
    pub fn broadcast_batch(&mut self, v: Var, batch: usize) -> Result<Var> {
        let sh = self.shape(v).to_vec();
        let block = self.value(v).len();
        let src = self.value(v).data().to_vec();
        let mut out = vec![0.0; batch * block];
        for b in 0..batch {
            out[b * block..(b + 1) * block].copy_from_slice(&src);
        }
        let mut shape = Vec::with_capacity(sh.len() + 1);
        shape.push(batch);
        shape.extend_from_slice(&sh);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::BroadcastBatch { v }))
    }

    // ---- convolutions ----------------------------------------------------

    /// Batched 2-D cross-correlation.
    ///
    /// `x: [B,Cin,H,W]`, `w: [Cout,Cin,k1,k2]`, optional bias `[Cout]`,
    /// `pad = (top, bottom, left, right)` zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: (usize, usize, usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("conv2d", format!("input must be [B,Cin,H,W], got {:?}", sx)));
        }
        if sw.len() != 4 {
            return Err(shape_err("conv2d", format!("kernel must be [Cout,Cin,k1,k2], got {:?}", sw)));
        }
        let (batch, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kcin, k1, k2) = (sw[0], sw[1], sw[2], sw[3]);
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("kernel input channels {} vs input channels {}", kcin, cin),
            ));
        }
        let (pt, pb, pl, pr) = pad;
        let hp = h + pt + pb;
        let wp = wdt + pl + pr;
        if k1 > hp {
            return Err(shape_err("conv2d", format!("kernel height {} exceeds padded height {}", k1, hp)));
        }
        if k2 > wp {
            return Err(shape_err("conv2d", format!("kernel width {} exceeds padded width {}", k2, wp)));
        }
        if let Some(bias) = b {
            if self.shape(bias) != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} vs output channels {}", self.shape(bias), cout),
                ));
            }
        }
        let hout = hp - k1 + 1;
        let wout = wp - k2 + 1;

        let xp = pad_input(self.value(x).data(), batch, cin, h, wdt, pad);
        let dw = self.value(w).data();
        let bias: Option<Vec<f64>> = b.map(|v| self.value(v).data().to_vec());
        let mut out = vec![0.0; batch * cout * hout * wout];
        for bi in 0..batch {
            for co in 0..cout {
                let b0 = bias.as_ref().map_or(0.0, |v| v[co]);
                for i in 0..hout {
                    for j in 0..wout {
                        let mut acc = b0;
                        for ci in 0..cin {
                            for m in 0..k1 {
                                let xbase = ((bi * cin + ci) * hp + i + m) * wp + j;
                                let wbase = ((co * cin + ci) * k1 + m) * k2;
                                let xrow = &xp[xbase..xbase + k2];
                                let wrow = &dw[wbase..wbase + k2];
                                for n in 0..k2 {
                                    acc += xrow[n] * wrow[n];
                                }
                            }
                        }
                        out[((bi * cout + co) * hout + i) * wout + j] = acc;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[batch, cout, hout, wout], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }))
    }

    /// Expands each latent column into a learned row:
    /// `x: [B,C,T,1]`, `w: [C,S]` -> `[B,C,T,S]`, with
    /// `out[b,c,t,s] = x[b,c,t,0] * w[c,s] (+ bias)`.
    ///
    /// Bias may be per channel `[C]` or a full learned row `[C,S]`.
    pub fn conv_transpose_row(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sx[3] != 1 {
            return Err(shape_err(
                "conv_transpose_row",
                format!("input must be [B,C,T,1], got {:?}", sx),
            ));
        }
        if sw.len() != 2 || sw[0] != sx[1] {
            return Err(shape_err(
                "conv_transpose_row",
                format!("kernel must be [C,S] with C = {}, got {:?}", sx[1], sw),
            ));
        }
        let (batch, c, t) = (sx[0], sx[1], sx[2]);
        let s = sw[1];
        if let Some(bias) = b {
            let sb = self.shape(bias);
            if sb != [c] && sb != [c, s] {
                return Err(shape_err(
                    "conv_transpose_row",
                    format!("bias must be [C] or [C,S], got {:?}", sb),
                ));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bias: Option<(Vec<f64>, bool)> = b.map(|v| {
            let per_row = self.shape(v).len() == 2;
            (self.value(v).data().to_vec(), per_row)
        });
        let mut out = vec![0.0; batch * c * t * s];
        for bi in 0..batch {
            for ci in 0..c {
                let wrow = &wd[ci * s..(ci + 1) * s];
                for ti in 0..t {
                    let xv = xd[(bi * c + ci) * t + ti];
                    let obase = ((bi * c + ci) * t + ti) * s;
                    match &bias {
                        Some((bv, true)) => {
                            let brow = &bv[ci * s..(ci + 1) * s];
                            for si in 0..s {
                                out[obase + si] = xv * wrow[si] + brow[si];
                            }
                        }
                        Some((bv, false)) => {
                            let b0 = bv[ci];
                            for si in 0..s {
                                out[obase + si] = xv * wrow[si] + b0;
                            }
                        }
                        None => {
                            for si in 0..s {
                                out[obase + si] = xv * wrow[si];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[batch, c, t, s], out)?;
        Ok(self.push(value, Op::ConvTransposeRow { x, w, b }))
    }

    /// Spatially local linear head applied independently to every column:
    /// `w: [M,K]`, `x: [B,K,S]` -> `[B,M,S]`, optional bias `[M]`.
    ///
    /// Weight and bias gradients reduce over columns in value order, so the
    /// result does not depend on how the spatial dimension is arranged.
    pub fn linear_map(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sx = self.shape(x).to_vec();
        if sw.len() != 2 || sx.len() != 3 {
            return Err(shape_err(
                "linear_map",
                format!("expected w [M,K], x [B,K,S]; got {:?}, {:?}", sw, sx),
            ));
        }
        if sw[1] != sx[1] {
            return Err(shape_err(
                "linear_map",
                format!("channel dims differ: {} vs {}", sw[1], sx[1]),
            ));
        }
        let (m, k) = (sw[0], sw[1]);
        let (batch, s) = (sx[0], sx[2]);
        if let Some(bias) = b {
            if self.shape(bias) != [m] {
                return Err(shape_err(
                    "linear_map",
                    format!("bias shape {:?} vs output channels {}", self.shape(bias), m),
                ));
            }
        }
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let bias: Option<Vec<f64>> = b.map(|v| self.value(v).data().to_vec());
        let mut out = vec![0.0; batch * m * s];
        for bi in 0..batch {
            for mi in 0..m {
                let obase = (bi * m + mi) * s;
                if let Some(bv) = &bias {
                    out[obase..obase + s].fill(bv[mi]);
                }
                for ki in 0..k {
                    let wv = wd[mi * k + ki];
                    let xbase = (bi * k + ki) * s;
                    for si in 0..s {
                        out[obase + si] += wv * xd[xbase + si];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[batch, m, s], out)?;
        Ok(self.push(value, Op::LinearMap { w, x, b }))
    }

    /// Masked graph convolution with packed per-edge weights:
    /// `x: [B,Cin,S]`, `w: [Cout,Cin,E]` with `pattern[e] = (i, j)` meaning
    /// `out[b,co,i] += w[co,ci,e] * x[b,ci,j]`.
    pub fn graph_conv(&mut self, x: Var, w: Var, pattern: SparsePattern) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(shape_err(
                "graph_conv",
                format!("expected x [B,Cin,S], w [Cout,Cin,E]; got {:?}, {:?}", sx, sw),
            ));
        }
        if sw[1] != sx[1] {
            return Err(shape_err(
                "graph_conv",
                format!("input channels {} vs kernel channels {}", sx[1], sw[1]),
            ));
        }
        if sw[2] != pattern.len() {
            return Err(shape_err(
                "graph_conv",
                format!("pattern has {} entries, weights have {}", pattern.len(), sw[2]),
            ));
        }
        let (batch, cin, s) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        if let Some(&(i, j)) = pattern.iter().find(|&&(i, j)| i >= s || j >= s) {
            return Err(shape_err(
                "graph_conv",
                format!("pattern entry ({}, {}) out of node range {}", i, j, s),
            ));
        }
        let e = pattern.len();
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; batch * cout * s];
        for bi in 0..batch {
            for co in 0..cout {
                let obase = (bi * cout + co) * s;
                for ci in 0..cin {
                    let wbase = (co * cin + ci) * e;
                    let xbase = (bi * cin + ci) * s;
                    for (ei, &(i, j)) in pattern.iter().enumerate() {
                        out[obase + i] += wd[wbase + ei] * xd[xbase + j];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[batch, cout, s], out)?;
        Ok(self.push(value, Op::GraphConv { x, w, pattern }))
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of every node reachable from `loss`.
    ///
    /// `loss` must be scalar; a second call without a fresh tape errors, as
    /// does any non-finite value on the tape (named by node).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Config("backward called twice on the same tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.value(loss).item()?.is_finite() {
            // Locate the first offending node for the error message.
            for (i, node) in self.nodes.iter().enumerate() {
                if !node.value.all_finite() {
                    return Err(Error::NonFinite {
                        context: format!("tape node {} ({})", i, node.op.name()),
                    });
                }
            }
            return Err(Error::NonFinite { context: "loss".into() });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let len = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_binary(a, b, g, |_, _| (1.0, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc_binary(a, b, g, |_, _| (1.0, -1.0));
            }
            Op::Mul(a, b) => {
                self.acc_binary(a, b, g, |x, y| (y, x));
            }
            Op::Div(a, b) => {
                self.acc_binary(a, b, g, |x, y| (1.0 / y, -x / (y * y)));
            }
            Op::Scale(a, c) => {
                self.acc_grad(a, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g) {
                        *bi += c * gi;
                    }
                });
            }
            Op::AddScalar(a) => {
                self.acc_grad(a, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g) {
                        *bi += gi;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data().to_vec();
                self.acc_grad(a, |buf| {
                    for ((bi, gi), yi) in buf.iter_mut().zip(g).zip(&y) {
                        *bi += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[id].value.data().to_vec();
                self.acc_grad(a, |buf| {
                    for ((bi, gi), yi) in buf.iter_mut().zip(g).zip(&y) {
                        *bi += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                self.acc_grad(a, |buf| {
                    for ((bi, gi), xi) in buf.iter_mut().zip(g).zip(&x) {
                        if *xi > 0.0 {
                            *bi += gi;
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = self.nodes[id].value.data().to_vec();
                self.acc_grad(a, |buf| {
                    for ((bi, gi), yi) in buf.iter_mut().zip(g).zip(&y) {
                        *bi += gi * 0.5 / yi;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.acc_grad(a, |buf| {
                    for bi in buf.iter_mut() {
                        *bi += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[0] / n;
                self.acc_grad(a, |buf| {
                    for bi in buf.iter_mut() {
                        *bi += gv;
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc_grad(a, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g) {
                        *bi += gi;
                    }
                });
            }
            Op::Transpose(a) => {
                let sh = self.nodes[a.0].value.shape().to_vec();
                let (m, n) = (sh[0], sh[1]);
                self.acc_grad(a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Concat { axis, parts } => {
                let out_sh = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_sh[..axis].iter().product();
                let inner: usize = out_sh[axis + 1..].iter().product();
                let row = out_sh[axis] * inner;
                let mut offset = 0usize;
                for p in parts {
                    let pa = self.nodes[p.0].value.shape()[axis];
                    let block = pa * inner;
                    self.acc_grad(p, |buf| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + block];
                            for (bi, gi) in buf[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *bi += gi;
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_sh = self.nodes[x.0].value.shape().to_vec();
                let out_sh = self.nodes[id].value.shape().to_vec();
                let outer: usize = in_sh[..axis].iter().product();
                let inner: usize = in_sh[axis + 1..].iter().product();
                let row = in_sh[axis] * inner;
                let len = out_sh[axis];
                self.acc_grad(x, |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[o * row + start * inner..o * row + (start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (bi, gi) in dst.iter_mut().zip(src) {
                            *bi += gi;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = self.nodes[a.0].value.data().to_vec();
                let db = self.nodes[b.0].value.data().to_vec();
                self.acc_grad(a, |buf| {
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * db[l * n + j];
                            }
                            buf[i * k + l] += acc;
                        }
                    }
                });
                self.acc_grad(b, |buf| {
                    for l in 0..k {
                        for i in 0..m {
                            let av = da[i * k + l];
                            for j in 0..n {
                                buf[l * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::BroadcastChannel { v } => {
                let out_sh = self.nodes[id].value.shape().to_vec();
                let (batch, c) = (out_sh[0], out_sh[1]);
                let inner: usize = out_sh[2..].iter().product();
                self.acc_grad(v, |buf| {
                    for b in 0..batch {
                        for (ci, bi) in buf.iter_mut().enumerate() {
                            let base = (b * c + ci) * inner;
                            *bi += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::ChannelMean { x } => {
                let in_sh = self.nodes[x.0].value.shape().to_vec();
                let (batch, c) = (in_sh[0], in_sh[1]);
                let inner: usize = in_sh[2..].iter().product();
                let count = (batch * inner) as f64;
                self.acc_grad(x, |buf| {
                    for b in 0..batch {
                        for ci in 0..c {
                            let gv = g[ci] / count;
                            let base = (b * c + ci) * inner;
                            for bi in &mut buf[base..base + inner] {
                                *bi += gv;
                            }
                        }
                    }
                });
            }
            Op::BroadcastBatch { v } => {
                let block = self.nodes[v.0].value.len();
                let batch = self.nodes[id].value.len() / block;
                self.acc_grad(v, |buf| {
                    for b in 0..batch {
                        for (bi, gi) in buf.iter_mut().zip(&g[b * block..(b + 1) * block]) {
                            *bi += gi;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, pad } => {
                self.backward_conv2d(id, x, w, b, pad, g);
            }
            Op::ConvTransposeRow { x, w, b } => {
                self.backward_conv_transpose_row(id, x, w, b, g);
            }
            Op::LinearMap { w, x, b } => {
                self.backward_linear_map(id, w, x, b, g);
            }
            Op::GraphConv { x, w, pattern } => {
                self.backward_graph_conv(x, w, &pattern, g);
            }
        }
        Ok(())
    }

    fn acc_binary(&mut self, a: Var, b: Var, g: &[f64], partials: impl Fn(f64, f64) -> (f64, f64)) {
        let da = self.nodes[a.0].value.data().to_vec();
        let db = self.nodes[b.0].value.data().to_vec();
        let fetch = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let n = g.len();
        self.acc_grad(a, |buf| {
            if buf.len() == 1 {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += g[i] * partials(da[0], fetch(&db, i)).0;
                }
                buf[0] += acc;
            } else {
                for i in 0..n {
                    buf[i] += g[i] * partials(da[i], fetch(&db, i)).0;
                }
            }
        });
        self.acc_grad(b, |buf| {
            if buf.len() == 1 {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += g[i] * partials(fetch(&da, i), db[0]).1;
                }
                buf[0] += acc;
            } else {
                for i in 0..n {
                    buf[i] += g[i] * partials(fetch(&da, i), db[i]).1;
                }
            }
        });
    }

    fn backward_conv2d(
        &mut self,
        id: usize,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: (usize, usize, usize, usize),
        g: &[f64],
    ) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let so = self.nodes[id].value.shape().to_vec();
        let (batch, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, k1, k2) = (sw[0], sw[1], sw[2], sw[3]);
        let (hout, wout) = (so[2], so[3]);
        let (pt, _, pl, _) = pad;
        let hp = h + pad.0 + pad.1;
        let wp = wdt + pad.2 + pad.3;

        let xp = pad_input(self.nodes[x.0].value.data(), batch, cin, h, wdt, pad);
        let wd = self.nodes[w.0].value.data().to_vec();

        // dW and padded dX accumulated locally, then scattered.
        let mut dw = vec![0.0; cout * cin * k1 * k2];
        let mut dxp = vec![0.0; batch * cin * hp * wp];
        for bi in 0..batch {
            for co in 0..cout {
                for i in 0..hout {
                    for j in 0..wout {
                        let gv = g[((bi * cout + co) * hout + i) * wout + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            for m in 0..k1 {
                                let xbase = ((bi * cin + ci) * hp + i + m) * wp + j;
                                let wbase = ((co * cin + ci) * k1 + m) * k2;
                                for n in 0..k2 {
                                    dw[wbase + n] += gv * xp[xbase + n];
                                    dxp[xbase + n] += gv * wd[wbase + n];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.acc_grad(w, |buf| {
            for (bi, di) in buf.iter_mut().zip(&dw) {
                *bi += di;
            }
        });
        self.acc_grad(x, |buf| {
            for bi in 0..batch {
                for ci in 0..cin {
                    for i in 0..h {
                        let src = ((bi * cin + ci) * hp + i + pt) * wp + pl;
                        let dst = ((bi * cin + ci) * h + i) * wdt;
                        for j in 0..wdt {
                            buf[dst + j] += dxp[src + j];
                        }
                    }
                }
            }
        });
        if let Some(bias) = b {
            let plane = hout * wout;
            self.acc_grad(bias, |buf| {
                for bi in 0..batch {
                    for (co, bufc) in buf.iter_mut().enumerate() {
                        let base = (bi * cout + co) * plane;
                        *bufc += g[base..base + plane].iter().sum::<f64>();
                    }
                }
            });
        }
    }

    fn backward_conv_transpose_row(&mut self, id: usize, x: Var, w: Var, b: Option<Var>, g: &[f64]) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let so = self.nodes[id].value.shape().to_vec();
        let (batch, c, t) = (sx[0], sx[1], sx[2]);
        let s = so[3];
        let xd = self.nodes[x.0].value.data().to_vec();
        let wd = self.nodes[w.0].value.data().to_vec();
        self.acc_grad(x, |buf| {
            for bi in 0..batch {
                for ci in 0..c {
                    let wrow = &wd[ci * s..(ci + 1) * s];
                    for ti in 0..t {
                        let gbase = ((bi * c + ci) * t + ti) * s;
                        let mut acc = 0.0;
                        for si in 0..s {
                            acc += g[gbase + si] * wrow[si];
                        }
                        buf[(bi * c + ci) * t + ti] += acc;
                    }
                }
            }
        });
        self.acc_grad(w, |buf| {
            for bi in 0..batch {
                for ci in 0..c {
                    for ti in 0..t {
                        let xv = xd[(bi * c + ci) * t + ti];
                        let gbase = ((bi * c + ci) * t + ti) * s;
                        for si in 0..s {
                            buf[ci * s + si] += xv * g[gbase + si];
                        }
                    }
                }
            }
        });
        if let Some(bias) = b {
            let per_row = self.nodes[bias.0].value.shape().len() == 2;
            self.acc_grad(bias, |buf| {
                for bi in 0..batch {
                    for ci in 0..c {
                        for ti in 0..t {
                            let gbase = ((bi * c + ci) * t + ti) * s;
                            if per_row {
                                for si in 0..s {
                                    buf[ci * s + si] += g[gbase + si];
                                }
                            } else {
                                buf[ci] += g[gbase..gbase + s].iter().sum::<f64>();
                            }
                        }
                    }
                }
            });
        }
    }

    fn backward_linear_map(&mut self, id: usize, w: Var, x: Var, b: Option<Var>, g: &[f64]) {
        let sw = self.nodes[w.0].value.shape().to_vec();
        let so = self.nodes[id].value.shape().to_vec();
        let (m, k) = (sw[0], sw[1]);
        let (batch, s) = (so[0], so[2]);
        let wd = self.nodes[w.0].value.data().to_vec();
        let xd = self.nodes[x.0].value.data().to_vec();

        // Per-column partials are reduced in value order so the accumulated
        // gradient is invariant to any permutation of the columns.
        let mut dw = vec![0.0; m * k];
        let mut col = vec![0.0f64; s];
        for mi in 0..m {
            for ki in 0..k {
                for (si, c) in col.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for bi in 0..batch {
                        acc += g[(bi * m + mi) * s + si] * xd[(bi * k + ki) * s + si];
                    }
                    *c = acc;
                }
                dw[mi * k + ki] = sorted_sum(&mut col);
            }
        }
        self.acc_grad(w, |buf| {
            for (bi, di) in buf.iter_mut().zip(&dw) {
                *bi += di;
            }
        });
        self.acc_grad(x, |buf| {
            for bi in 0..batch {
                for ki in 0..k {
                    let xbase = (bi * k + ki) * s;
                    for mi in 0..m {
                        let wv = wd[mi * k + ki];
                        let gbase = (bi * m + mi) * s;
                        for si in 0..s {
                            buf[xbase + si] += wv * g[gbase + si];
                        }
                    }
                }
            }
        });
        if let Some(bias) = b {
            let mut db = vec![0.0; m];
            for (mi, dbm) in db.iter_mut().enumerate() {
                for (si, c) in col.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for bi in 0..batch {
                        acc += g[(bi * m + mi) * s + si];
                    }
                    *c = acc;
                }
                *dbm = sorted_sum(&mut col);
            }
            self.acc_grad(bias, |buf| {
                for (bi, di) in buf.iter_mut().zip(&db) {
                    *bi += di;
                }
            });
        }
    }

    fn backward_graph_conv(&mut self, x: Var, w: Var, pattern: &SparsePattern, g: &[f64]) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let (batch, cin, s) = (sx[0], sx[1], sx[2]);
        let (cout, e) = (sw[0], sw[2]);
        let xd = self.nodes[x.0].value.data().to_vec();
        let wd = self.nodes[w.0].value.data().to_vec();
        self.acc_grad(w, |buf| {
            for bi in 0..batch {
                for co in 0..cout {
                    let gbase = (bi * cout + co) * s;
                    for ci in 0..cin {
                        let wbase = (co * cin + ci) * e;
                        let xbase = (bi * cin + ci) * s;
                        for (ei, &(i, j)) in pattern.iter().enumerate() {
                            buf[wbase + ei] += g[gbase + i] * xd[xbase + j];
                        }
                    }
                }
            }
        });
        self.acc_grad(x, |buf| {
            for bi in 0..batch {
                for co in 0..cout {
                    let gbase = (bi * cout + co) * s;
                    for ci in 0..cin {
                        let wbase = (co * cin + ci) * e;
                        let xbase = (bi * cin + ci) * s;
                        for (ei, &(i, j)) in pattern.iter().enumerate() {
                            buf[xbase + j] += wd[wbase + ei] * g[gbase + i];
                        }
                    }
                }
            }
        });
    }
}

fn pad_input(
    x: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    pad: (usize, usize, usize, usize),
) -> Vec<f64> {
    let (pt, pb, pl, pr) = pad;
    if pt == 0 && pb == 0 && pl == 0 && pr == 0 {
        return x.to_vec();
    }
    let hp = h + pt + pb;
    let wp = w + pl + pr;
    let mut out = vec![0.0; batch * cin * hp * wp];
    for b in 0..batch {
        for c in 0..cin {
            for i in 0..h {
                let src = ((b * cin + c) * h + i) * w;
                let dst = ((b * cin + c) * hp + i + pt) * wp + pl;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    out
}

/// Sums a buffer in ascending value order (scrambles the buffer).
fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let ones = tape.leaf(Tensor::filled(&[2, 3], 1.0));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn nan_loss_names_offending_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, -1.0]));
        let r = tape.sqrt(x); // sqrt(-1) = NaN
        let loss = tape.sum(r);
        let err = tape.backward(loss).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sqrt"), "unexpected error: {msg}");
    }

    #[test]
    fn conv2d_all_ones_sums() {
        // 1-channel 3x3 all-ones input, one 2x2 all-ones filter, no padding:
        // every output entry is 4.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), (0, 0, 0, 0)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(t(&[1, 1, 1, 1], vec![1.0]));
        let y = tape.conv2d(x, w, None, (0, 0, 0, 0)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_shape_mismatch_names_dimension() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]));
        let err = tape.conv2d(x, w, None, (0, 0, 0, 0)).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn conv_transpose_row_outer_product() {
        // input column (1,2,3), kernel row (1,0,-1), zero bias.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]));
        let w = tape.leaf(t(&[1, 3], vec![1.0, 0.0, -1.0]));
        let y = tape.conv_transpose_row(x, w, None).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 3.0, 0.0, -3.0]
        );
    }

    #[test]
    fn conv_transpose_row_zero_input_replicates_bias_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 1]));
        let w = tape.leaf(t(&[1, 3], vec![5.0, 5.0, 5.0]));
        let b = tape.leaf(t(&[1, 3], vec![0.1, 0.2, 0.3]));
        let y = tape.conv_transpose_row(x, w, Some(b)).unwrap();
        for ti in 0..4 {
            assert_eq!(&tape.value(y).data()[ti * 3..(ti + 1) * 3], &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn conv_transpose_row_rejects_wide_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(tape.conv_transpose_row(x, w, None).is_err());
    }

    #[test]
    fn linear_map_selects_channel_with_one_hot() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(t(&[1, 3], vec![0.0, 1.0, 0.0]));
        let y = tape.linear_map(w, x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn graph_conv_identity_pattern_is_per_node() {
        let pattern: SparsePattern = Arc::new(vec![(0, 0), (1, 1), (2, 2)]);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3], vec![1.0, 2.0, 3.0]));
        let w = tape.leaf(t(&[1, 1, 3], vec![10.0, 20.0, 30.0]));
        let y = tape.graph_conv(x, w, pattern).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 40.0, 90.0]);
    }

    #[test]
    fn linearity_of_backward() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g) on shared leaves.
        let data = vec![0.3, -1.2, 2.5, 0.7];
        let (a, b) = (2.5, -1.25);

        let run = |wa: f64, wb: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[4], data.clone()));
            let f = {
                let sq = tape.mul(x, x).unwrap();
                tape.sum(sq)
            };
            let g = {
                let s = tape.sigmoid(x);
                tape.mean(s)
            };
            let fa = tape.scale(f, wa);
            let gb = tape.scale(g, wb);
            let loss = tape.add(fa, gb).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };

        let combined = run(a, b);
        let only_f = run(1.0, 0.0);
        let only_g = run(0.0, 1.0);
        for i in 0..4 {
            let expect = a * only_f[i] + b * only_g[i];
            assert!((combined[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn determinism_bit_identical_across_runs() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1, 1, 3, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]));
            let w = tape.leaf(t(&[1, 1, 2, 2], vec![0.5, -0.5, 0.25, 1.5]));
            let y = tape.conv2d(x, w, None, (1, 1, 1, 1)).unwrap();
            let r = tape.relu(y);
            let loss = tape.mean(r);
            tape.backward(loss).unwrap();
            (tape.value(y).data().to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
