use matrixmultiply::dgemm;

use super::tensor::{axis_split, broadcast_shape, strides, BcastMap, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Neg,
    Sqrt,
    Powf(f64),
    ClampMin(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, BcastMap, BcastMap),
    Unary(UnaryKind, Var),
    Sum(Var),
    SumAxis(Var, usize),
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize, eps: f64 },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<isize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    BilinearSample { map: Var, loc: Var },
    DeformSample { value: Var, loc: Var, attn: Var, levels: Vec<LevelShape> },
}

/// Spatial extent of one level inside a token-flattened multi-level map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    pub start: usize,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Node order is topological.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped_samples: usize,
}

/// Result of [`Tape::backward`]: gradient of the root w.r.t. every node that requires grad.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// C[m×n] (+)= A[m×k] · B[k×n] with explicit row/col strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slices cover the strided extents computed by the callers.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Corners {
    idx: [usize; 4],
    w: [f64; 4],
    du: [f64; 4],
    dv: [f64; 4],
    clamped: [bool; 2],
}

/// Bilinear corner weights for pixel location (u, v) on an h×w grid with border clamping.
#[inline]
fn corners(u: f64, v: f64, h: usize, w: usize) -> Corners {
    let (uc, cu) = clamp_coord(u, w);
    let (vc, cv) = clamp_coord(v, h);
    let u0 = (uc.floor() as usize).min(w - 1);
    let v0 = (vc.floor() as usize).min(h - 1);
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let fu = uc - u0 as f64;
    let fv = vc - v0 as f64;
    let (gu, gv) = (if cu || u1 == u0 { 0.0 } else { 1.0 }, if cv || v1 == v0 { 0.0 } else { 1.0 });
    Corners {
        idx: [v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1],
        w: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        du: [-(1.0 - fv) * gu, (1.0 - fv) * gu, -fv * gu, fv * gu],
        dv: [-(1.0 - fu) * gv, -fu * gv, (1.0 - fu) * gv, fu * gv],
        clamped: [cu, cv],
    }
}

#[inline]
fn clamp_coord(x: f64, extent: usize) -> (f64, bool) {
    let hi = (extent - 1) as f64;
    if x < 0.0 {
        (0.0, true)
    } else if x > hi {
        (hi, true)
    } else {
        (x, false)
    }
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

    /// Number of sample locations clamped to a map border so far.
    pub fn clamped_samples(&self) -> usize {
        self.clamped_samples
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(name, &sa, &sb))?;
        let ma = BcastMap::new(&out_shape, &sa);
        let mb = BcastMap::new(&out_shape, &sb);
        let total: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match (&ma, &mb) {
            (BcastMap::Same, BcastMap::Same) => da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect(),
            _ => (0..total).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Binary(kind, a, b, ma, mb), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = self.value(x);
        let f = |v: f64| -> f64 {
            match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Neg => -v,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Powf(p) => v.powf(p),
                UnaryKind::ClampMin(m) => v.max(m),
                UnaryKind::Scale(s) => v * s,
                UnaryKind::AddScalar(s) => v + s,
            }
        };
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Unary(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Cos, x)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(UnaryKind::Powf(p), x)
    }
    pub fn clamp_min(&mut self, x: Var, m: f64) -> Var {
        self.unary(UnaryKind::ClampMin(m), x)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::Scale(s), x)
    }
    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::AddScalar(s), x)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis(x, axis), &[x]))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[.., m, k] × [k, n]` or batched `[b, m, k] × [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_rhs = sb.len() == 2;
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let bb: usize = sb[..sb.len() - 2].iter().product();
        if kb != k || (!shared_rhs && (sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2])) {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            gemm(batch * m, k, n, ad, k as isize, 1, bd, n as isize, 1, 0.0, &mut out);
        } else {
            debug_assert_eq!(bb, batch);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    k as isize,
                    1,
                    &bd[i * k * n..],
                    n as isize,
                    1,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let t = Tensor::from_parts(out_shape, out);
        Ok(self.push(t, Op::Matmul { a, b, batch, m, k, n, shared_rhs }, &[a, b]))
    }

    /// `x·w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 2D convolution on a channels-last image `x: [h, w, cin]` with `w: [kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sx[2] || stride == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let col = im2col(self.value(x).data(), h, wd, cin, kh, kw, stride, pad, ho, wo);
        let kdim = kh * kw * cin;
        let mut out = vec![0.0; ho * wo * cout];
        gemm(ho * wo, kdim, cout, &col, kdim as isize, 1, self.value(w).data(), cout as isize, 1, 0.0, &mut out);
        let t = Tensor::from_parts(vec![ho, wo, cout], out);
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    // ---- normalisation -----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (xd[at(l)] - mx).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    /// Normalise to zero mean / unit variance along `axis` (no affine terms).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("layer_norm", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| xd[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (xd[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for l in 0..len {
                    out[at(l)] = (xd[at(l)] - mean) * rstd;
                }
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::LayerNorm { x, axis, eps }, &[x]))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// General axis permutation; `out.shape[i] = in.shape[perm[i]]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("transpose", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let t = Tensor::from_parts(out_shape, out);
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let t = Tensor::from_parts(out_shape, out);
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    // ---- indexing ------------------------------------------------------------

    /// Rows of `x: [n, ..]` picked by `idx`; a negative index yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[isize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("gather", &shape, &[idx.len()]));
        }
        let n = shape[0];
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n as isize) {
            return Err(Error::dim("gather", &shape, &[bad as usize]));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; idx.len() * row];
        for (r, &i) in idx.iter().enumerate() {
            if i >= 0 {
                let i = i as usize;
                out[r * row..(r + 1) * row].copy_from_slice(&xd[i * row..(i + 1) * row]);
            }
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let t = Tensor::from_parts(out_shape, out);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Accumulates row `r` of `x: [m, ..]` into row `idx[r]` of an `[n, ..]` zero tensor.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("scatter_add", &shape, &[idx.len(), n]));
        }
        let row: usize = shape[1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * row];
        for (r, &i) in idx.iter().enumerate() {
            for (d, s) in out[i * row..(i + 1) * row].iter_mut().zip(&xd[r * row..(r + 1) * row]) {
                *d += s;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let t = Tensor::from_parts(out_shape, out);
        Ok(self.push(t, Op::ScatterAddRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Column-wise max of the rows of `x: [m, c]` sharing a segment id; empty segments are zero.
    pub fn segment_max(&mut self, x: Var, seg: &[usize], n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != seg.len() || seg.iter().any(|&s| s >= n) {
            return Err(Error::dim("segment_max", &shape, &[seg.len(), n]));
        }
        let c = shape[1];
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![usize::MAX; n * c];
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let v = xd[r * c + j];
                if v > out[s * c + j] {
                    out[s * c + j] = v;
                    argmax[s * c + j] = r;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&argmax) {
            if *a == usize::MAX {
                *o = 0.0;
            }
        }
        let t = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(t, Op::SegmentMax { x, argmax }, &[x]))
    }

    // ---- sampling ------------------------------------------------------------

    /// Bilinear samples of `map: [h, w, c]` at pixel locations `loc: [n, 2]` holding (u, v),
    /// u along the width axis. Locations outside the grid are clamped to the border.
    pub fn bilinear_sample(&mut self, map: Var, loc: Var) -> Result<Var> {
        let (sm, sl) = (self.shape(map).to_vec(), self.shape(loc).to_vec());
        if sm.len() != 3 || sl.len() != 2 || sl[1] != 2 || sm[0] == 0 || sm[1] == 0 {
            return Err(Error::dim("bilinear_sample", &sm, &sl));
        }
        let (h, w, c) = (sm[0], sm[1], sm[2]);
        let n = sl[0];
        let md = self.value(map).data();
        let ld = self.value(loc).data();
        let mut out = vec![0.0; n * c];
        let mut count = 0;
        for i in 0..n {
            let cr = corners(ld[2 * i], ld[2 * i + 1], h, w);
            if cr.clamped[0] || cr.clamped[1] {
                count += 1;
            }
            let dst = &mut out[i * c..(i + 1) * c];
            for q in 0..4 {
                let wq = cr.w[q];
                if wq == 0.0 {
                    continue;
                }
                let src = &md[cr.idx[q] * c..(cr.idx[q] + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wq * s;
                }
            }
        }
        self.clamped_samples += count;
        let t = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(t, Op::BilinearSample { map, loc }, &[map, loc]))
    }

    /// Multi-level, multi-head weighted bilinear sampling.
    ///
    /// `value: [s, c]` stacks the flattened levels (`levels[j].start` is the first row of level j),
    /// `loc: [nq, heads, nlev, k, 2]` holds pixel coordinates on each level, `attn: [nq, heads, nlev, k]`.
    /// Output `[nq, c]`: head `h` owns channels `h*c/heads .. (h+1)*c/heads`.
    pub fn deform_sample(&mut self, value: Var, loc: Var, attn: Var, levels: &[LevelShape]) -> Result<Var> {
        let (sv, sl, sa) = (self.shape(value).to_vec(), self.shape(loc).to_vec(), self.shape(attn).to_vec());
        if sv.len() != 2 || sl.len() != 5 || sl[4] != 2 || sa[..] != sl[..4] || sl[2] != levels.len() {
            return Err(Error::dim("deform_sample", &sv, &sl));
        }
        let (nq, heads, nlev, k) = (sl[0], sl[1], sl[2], sl[3]);
        let c = sv[1];
        if heads == 0 || c % heads != 0 {
            return Err(Error::dim("deform_sample", &sv, &sl));
        }
        let total: usize = levels.iter().map(|l| l.height * l.width).sum();
        if levels.iter().any(|l| l.start + l.height * l.width > sv[0]) || total > sv[0] {
            return Err(Error::dim("deform_sample", &sv, &[total]));
        }
        let dh = c / heads;
        let vd = self.value(value).data();
        let ld = self.value(loc).data();
        let ad = self.value(attn).data();
        let mut out = vec![0.0; nq * c];
        let mut count = 0;
        for q in 0..nq {
            for h in 0..heads {
                let dst = &mut out[q * c + h * dh..q * c + (h + 1) * dh];
                for (j, lev) in levels.iter().enumerate() {
                    for p in 0..k {
                        let s = ((q * heads + h) * nlev + j) * k + p;
                        let a = ad[s];
                        let cr = corners(ld[2 * s], ld[2 * s + 1], lev.height, lev.width);
                        if cr.clamped[0] || cr.clamped[1] {
                            count += 1;
                        }
                        for qq in 0..4 {
                            let wq = a * cr.w[qq];
                            if wq == 0.0 {
                                continue;
                            }
                            let base = (lev.start + cr.idx[qq]) * c + h * dh;
                            for (d, v) in dst.iter_mut().zip(&vd[base..base + dh]) {
                                *d += wq * v;
                            }
                        }
                    }
                }
            }
        }
        self.clamped_samples += count;
        let t = Tensor::from_parts(vec![nq, c], out);
        Ok(self.push(
            t,
            Op::DeformSample {
                value,
                loc,
                attn,
                levels: levels.to_vec(),
            },
            &[value, loc, attn],
        ))
    }

    // ---- reverse pass ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. The tape is not modified, so repeated calls
    /// return identical gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&data) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), data));
            }
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, ma, mb) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (ad.len(), bd.len());
                let rg = |v: Var| self.nodes[v.0].requires_grad;
                match kind {
                    BinaryKind::Add => {
                        if rg(*a) {
                            self.accumulate(grads, *a, ma.reduce(gd, na));
                        }
                        if rg(*b) {
                            self.accumulate(grads, *b, mb.reduce(gd, nb));
                        }
                    }
                    BinaryKind::Sub => {
                        if rg(*a) {
                            self.accumulate(grads, *a, ma.reduce(gd, na));
                        }
                        if rg(*b) {
                            let mut r = mb.reduce(gd, nb);
                            r.iter_mut().for_each(|v| *v = -*v);
                            self.accumulate(grads, *b, r);
                        }
                    }
                    BinaryKind::Mul => {
                        if rg(*a) {
                            let t: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * bd[mb.at(i)]).collect();
                            self.accumulate(grads, *a, ma.reduce(&t, na));
                        }
                        if rg(*b) {
                            let t: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * ad[ma.at(i)]).collect();
                            self.accumulate(grads, *b, mb.reduce(&t, nb));
                        }
                    }
                    BinaryKind::Div => {
                        if rg(*a) {
                            let t: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g / bd[mb.at(i)]).collect();
                            self.accumulate(grads, *a, ma.reduce(&t, na));
                        }
                        if rg(*b) {
                            let t: Vec<f64> = gd
                                .iter()
                                .enumerate()
                                .map(|(i, g)| -g * out[i] / bd[mb.at(i)])
                                .collect();
                            self.accumulate(grads, *b, mb.reduce(&t, nb));
                        }
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xd = self.value(*x).data();
                let d: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        let (v, y) = (xd[i], out[i]);
                        let local = match kind {
                            UnaryKind::Relu => {
                                if v > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Exp => y,
                            UnaryKind::Log => 1.0 / v,
                            UnaryKind::Sin => v.cos(),
                            UnaryKind::Cos => -v.sin(),
                            UnaryKind::Abs => v.signum() * (v != 0.0) as u8 as f64,
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Sqrt => 0.5 / y,
                            UnaryKind::Powf(p) => {
                                if v == 0.0 && *p >= 1.0 {
                                    if *p == 1.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                } else {
                                    p * v.powf(p - 1.0)
                                }
                            }
                            UnaryKind::ClampMin(m) => {
                                if v >= *m {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Scale(s) => *s,
                            UnaryKind::AddScalar(_) => 1.0,
                        };
                        gd[i] * local
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        d[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Matmul { a, b, batch, m, k, n, shared_rhs } => {
                let (m, k, n, batch) = (*m, *k, *n, *batch);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    if *shared_rhs {
                        // dA = G · Bᵀ
                        gemm(batch * m, n, k, gd, n as isize, 1, bd, 1, n as isize, 0.0, &mut da);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..],
                                n as isize,
                                1,
                                &bd[i * k * n..],
                                1,
                                n as isize,
                                0.0,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db;
                    if *shared_rhs {
                        // dB = Aᵀ · G over all stacked rows
                        db = vec![0.0; k * n];
                        gemm(k, batch * m, n, ad, 1, k as isize, gd, n as isize, 1, 0.0, &mut db);
                    } else {
                        db = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..],
                                1,
                                k as isize,
                                &gd[i * m * n..],
                                n as isize,
                                1,
                                0.0,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (h, wd, cin) = (sx[0], sx[1], sx[2]);
                let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
                let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                let kdim = kh * kw * cin;
                if self.requires_grad(*w) {
                    let col = im2col(self.value(*x).data(), h, wd, cin, kh, kw, *stride, *pad, ho, wo);
                    let mut dw = vec![0.0; kdim * cout];
                    gemm(kdim, ho * wo, cout, &col, 1, kdim as isize, gd, cout as isize, 1, 0.0, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*x) {
                    let mut dcol = vec![0.0; ho * wo * kdim];
                    gemm(ho * wo, cout, kdim, gd, cout as isize, 1, self.value(*w).data(), 1, cout as isize, 0.0, &mut dcol);
                    let dx = col2im(&dcol, h, wd, cin, kh, kw, *stride, *pad, ho, wo);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * out[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = out[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, axis, eps } => {
                let xd = self.value(*x).data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; gd.len()];
                let nf = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mean = (0..len).map(|l| xd[at(l)]).sum::<f64>() / nf;
                        let var = (0..len).map(|l| (xd[at(l)] - mean).powi(2)).sum::<f64>() / nf;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let gsum: f64 = (0..len).map(|l| gd[at(l)]).sum();
                        let gy: f64 = (0..len).map(|l| gd[at(l)] * out[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = rstd / nf * (nf * gd[at(l)] - gsum - out[at(l)] * gy);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = permute_data(gd, node.value.shape(), &inv);
                self.accumulate(grads, *x, d);
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut off = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[(o * total + off) * inner..(o * total + off + len) * inner]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let span = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    d[(o * len + start) * inner..(o * len + start + span) * inner]
                        .copy_from_slice(&gd[o * span * inner..(o + 1) * span * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x);
                let row: usize = shape[1..].iter().product();
                let mut d = vec![0.0; shape[0] * row];
                for (r, &i) in idx.iter().enumerate() {
                    if i >= 0 {
                        let i = i as usize;
                        for (a, b) in d[i * row..(i + 1) * row].iter_mut().zip(&gd[r * row..(r + 1) * row]) {
                            *a += b;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ScatterAddRows { x, idx } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                let mut d = Vec::with_capacity(idx.len() * row);
                for &i in idx {
                    d.extend_from_slice(&gd[i * row..(i + 1) * row]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::SegmentMax { x, argmax } => {
                let shape = self.shape(*x);
                let c = shape[1];
                let mut d = vec![0.0; shape[0] * c];
                for (o, &r) in argmax.iter().enumerate() {
                    if r != usize::MAX {
                        d[r * c + o % c] += gd[o];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::BilinearSample { map, loc } => {
                let sm = self.shape(*map);
                let (h, w, c) = (sm[0], sm[1], sm[2]);
                let md = self.value(*map).data();
                let ld = self.value(*loc).data();
                let n = ld.len() / 2;
                let want_map = self.requires_grad(*map);
                let want_loc = self.requires_grad(*loc);
                let mut dmap = if want_map { vec![0.0; md.len()] } else { Vec::new() };
                let mut dloc = vec![0.0; ld.len()];
                for i in 0..n {
                    let cr = corners(ld[2 * i], ld[2 * i + 1], h, w);
                    let gi = &gd[i * c..(i + 1) * c];
                    for q in 0..4 {
                        let base = cr.idx[q] * c;
                        if want_map && cr.w[q] != 0.0 {
                            for (a, g) in dmap[base..base + c].iter_mut().zip(gi) {
                                *a += cr.w[q] * g;
                            }
                        }
                        if want_loc && (cr.du[q] != 0.0 || cr.dv[q] != 0.0) {
                            let dot: f64 = md[base..base + c].iter().zip(gi).map(|(m, g)| m * g).sum();
                            dloc[2 * i] += cr.du[q] * dot;
                            dloc[2 * i + 1] += cr.dv[q] * dot;
                        }
                    }
                }
                if want_map {
                    self.accumulate(grads, *map, dmap);
                }
                if want_loc {
                    self.accumulate(grads, *loc, dloc);
                }
            }
            Op::DeformSample { value, loc, attn, levels } => {
                let sl = self.shape(*loc);
                let (nq, heads, nlev, k) = (sl[0], sl[1], sl[2], sl[3]);
                let vd = self.value(*value).data();
                let ld = self.value(*loc).data();
                let ad = self.value(*attn).data();
                let c = self.shape(*value)[1];
                let dh = c / heads;
                let (wv, wl, wa) = (self.requires_grad(*value), self.requires_grad(*loc), self.requires_grad(*attn));
                let mut dv = if wv { vec![0.0; vd.len()] } else { Vec::new() };
                let mut dl = vec![0.0; if wl { ld.len() } else { 0 }];
                let mut da = vec![0.0; if wa { ad.len() } else { 0 }];
                for q in 0..nq {
                    for h in 0..heads {
                        let gq = &gd[q * c + h * dh..q * c + (h + 1) * dh];
                        for (j, lev) in levels.iter().enumerate() {
                            for p in 0..k {
                                let s = ((q * heads + h) * nlev + j) * k + p;
                                let a = ad[s];
                                let cr = corners(ld[2 * s], ld[2 * s + 1], lev.height, lev.width);
                                let mut sampled_dot = 0.0;
                                let (mut du, mut dvv) = (0.0, 0.0);
                                for qq in 0..4 {
                                    let base = (lev.start + cr.idx[qq]) * c + h * dh;
                                    let vals = &vd[base..base + dh];
                                    let dot: f64 = vals.iter().zip(gq).map(|(v, g)| v * g).sum();
                                    sampled_dot += cr.w[qq] * dot;
                                    du += cr.du[qq] * dot;
                                    dvv += cr.dv[qq] * dot;
                                    if wv {
                                        let wq = a * cr.w[qq];
                                        if wq != 0.0 {
                                            for (d, g) in dv[base..base + dh].iter_mut().zip(gq) {
                                                *d += wq * g;
                                            }
                                        }
                                    }
                                }
                                if wa {
                                    da[s] += sampled_dot;
                                }
                                if wl {
                                    dl[2 * s] += a * du;
                                    dl[2 * s + 1] += a * dvv;
                                }
                            }
                        }
                    }
                }
                if wv {
                    self.accumulate(grads, *value, dv);
                }
                if wl {
                    self.accumulate(grads, *loc, dl);
                }
                if wa {
                    self.accumulate(grads, *attn, da);
                }
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if r == 0 {
        return src.to_vec();
    }
    // Innermost output axis handled as a tight strided loop.
    let last = out_shape[r - 1];
    let last_stride = eff[r - 1];
    let mut counter = vec![0usize; r - 1];
    let mut base = 0usize;
    let outer = if last == 0 { 0 } else { total / last };
    for _ in 0..outer {
        for i in 0..last {
            out.push(src[base + i * last_stride]);
        }
        for d in (0..r - 1).rev() {
            counter[d] += 1;
            base += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let kdim = kh * kw * cin;
    let mut col = vec![0.0; ho * wo * kdim];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut col[(oy * wo + ox) * kdim..(oy * wo + ox + 1) * kdim];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * cin;
                    let dst = (ky * kw + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let kdim = kh * kw * cin;
    let mut x = vec![0.0; h * w * cin];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &col[(oy * wo + ox) * kdim..(oy * wo + ox + 1) * kdim];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * cin;
                    let src = (ky * kw + kx) * cin;
                    for (a, b) in x[dst..dst + cin].iter_mut().zip(&row[src..src + cin]) {
                        *a += b;
                    }
                }
            }
        }
    }
    x
}
