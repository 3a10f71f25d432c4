use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{shape_err, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    GatherRows { x: usize, idx: Arc<Vec<Option<usize>>> },
    AddBroadcast { x: usize, b: usize, axis: usize },
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    Softmax { x: usize, axis: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    InstanceNorm { x: usize, inv: Vec<T> },
    AvgPool { x: usize, k: usize },
    Bilinear { fmaps: usize, pts: usize },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eagerly-built computation record. Every op runs immediately and appends a
/// node; node order is a valid topological order, so backward is a single
/// reverse sweep.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<HashMap<usize, Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_node(value, op, rg))
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.leaf_shared(value, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.borrow().get(&v.0).cloned()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, "operands", format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(sa)
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let shape = self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(shape, data)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).unwrap()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let t = self.map(x, |a| a * c);
        self.push("scale", t, Op::Scale(x.0, c), &[x.0])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let t = self.map(x, |a| if a > T::zero() { a } else { T::zero() });
        self.push("relu", t, Op::Relu(x.0), &[x.0])
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        let t = self.map(x, |a| a.abs());
        self.push("abs", t, Op::Abs(x.0), &[x.0])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = (*self.value(x)).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x.0), &[x.0])
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", "axes", format!("{:?} is not a permutation of rank {}", perm, rank)));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let data = kernels::permute(v.data(), v.shape(), perm);
        self.push("permute", Tensor::new(shape, data)?, Op::Permute(x.0, perm.to_vec()), &[x.0])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: v.rank(),
            });
        }
        if start + len > v.shape()[axis] {
            return Err(shape_err(
                "narrow",
                format!("axis {}", axis),
                format!("range {}..{} exceeds extent {}", start, start + len, v.shape()[axis]),
            ));
        }
        let (outer, ext, inner) = kernels::axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.push("narrow", Tensor::new(shape, data)?, Op::Narrow { x: x.0, axis, start }, &[x.0])
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base_shape = self.shape(*first);
        if axis >= base_shape.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base_shape.len(),
            });
        }
        let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base_shape.len() {
                return Err(shape_err("concat", "rank", format!("{:?} vs {:?}", s, base_shape)));
            }
            for (d, (&a, &b)) in s.iter().zip(&base_shape).enumerate() {
                if d != axis && a != b {
                    return Err(shape_err("concat", format!("axis {}", d), format!("{} vs {}", a, b)));
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let e = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Row gather on a `[rows, dim]` tensor; `None` yields a zero row.
    pub fn gather_rows(&self, x: Var, idx: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(shape_err("gather_rows", "rank", format!("expected 2, got {:?}", v.shape())));
        }
        let (rows, dim) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![T::zero(); idx.len() * dim];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(shape_err("gather_rows", "row index", format!("{} >= {}", i, rows)));
                }
                data[r * dim..(r + 1) * dim].copy_from_slice(&v.data()[i * dim..(i + 1) * dim]);
            }
        }
        let n = idx.len();
        self.push("gather_rows", Tensor::new(vec![n, dim], data)?, Op::GatherRows { x: x.0, idx }, &[x.0])
    }

    /// `x + b` with `b` (rank 1) broadcast along every axis except `axis`.
    pub fn add_broadcast(&self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if axis >= vx.rank() {
            return Err(TensorError::Axis {
                op: "add_broadcast",
                axis,
                rank: vx.rank(),
            });
        }
        if vb.rank() != 1 || vb.shape()[0] != vx.shape()[axis] {
            return Err(shape_err(
                "add_broadcast",
                format!("axis {}", axis),
                format!("bias {:?} vs input {:?}", vb.shape(), vx.shape()),
            ));
        }
        let (outer, ext, inner) = kernels::axis_split(vx.shape(), axis);
        let mut data = vx.data().to_vec();
        for o in 0..outer {
            for e in 0..ext {
                let bv = vb.data()[e];
                for v in data[(o * ext + e) * inner..(o * ext + e + 1) * inner].iter_mut() {
                    *v += bv;
                }
            }
        }
        self.push(
            "add_broadcast",
            Tensor::new(vx.shape().to_vec(), data)?,
            Op::AddBroadcast { x: x.0, b: b.0, axis },
            &[x.0, b.0],
        )
    }

    fn mm_dims(&self, op: &'static str, sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<(usize, usize, usize)> {
        let r = sa.len();
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(shape_err(op, "inner dimension", format!("{:?} x {:?} (ta={}, tb={})", sa, sb, ta, tb)));
        }
        Ok((m, ka, n))
    }

    /// `op(a) @ op(b)` for rank-2 operands.
    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(shape_err("matmul", "rank", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = self.mm_dims("matmul", va.shape(), vb.shape(), ta, tb)?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(ta, tb, m, n, k, T::one(), va.data(), vb.data(), T::zero(), &mut out);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a: a.0, b: b.0, ta, tb },
            &[a.0, b.0],
        )
    }

    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false, false)?;
        match b {
            Some(b) => self.add_broadcast(y, b, 1),
            None => Ok(y),
        }
    }

    /// Batched `op(a) @ op(b)` for rank-3 operands sharing the batch extent.
    pub fn bmm(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3 || vb.rank() != 3 {
            return Err(shape_err("bmm", "rank", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        if va.shape()[0] != vb.shape()[0] {
            return Err(shape_err("bmm", "batch", format!("{} vs {}", va.shape()[0], vb.shape()[0])));
        }
        let (m, k, n) = self.mm_dims("bmm", va.shape(), vb.shape(), ta, tb)?;
        let bs = va.shape()[0];
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            T::gemm(
                ta,
                tb,
                m,
                n,
                k,
                T::one(),
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push("bmm", Tensor::new(vec![bs, m, n], out)?, Op::Bmm { a: a.0, b: b.0, ta, tb }, &[a.0, b.0])
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: v.rank(),
            });
        }
        let (o, l, i) = kernels::axis_split(v.shape(), axis);
        let y = kernels::softmax_forward(v.data(), o, l, i);
        self.push("softmax", Tensor::new(v.shape().to_vec(), y)?, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    /// 2-D convolution with symmetric zero padding. Output extent is
    /// `(H + 2·padding − kh) / stride + 1` (floor).
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, (padding, padding))
    }

    pub fn conv2d_padded(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 {
            return Err(shape_err("conv2d", "input rank", format!("expected [N,C,H,W], got {:?}", sx)));
        }
        if sw.len() != 4 {
            return Err(shape_err("conv2d", "weight rank", format!("expected [O,C,kh,kw], got {:?}", sw)));
        }
        if sw[1] != sx[1] {
            return Err(shape_err("conv2d", "channels", format!("input C={} but weight C={}", sx[1], sw[1])));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", "kernel", format!("extent {}x{} must be odd", kh, kw)));
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if sx[2] + 2 * pad.0 < kh || sx[3] + 2 * pad.1 < kw {
            return Err(shape_err("conv2d", "spatial", format!("kernel {}x{} larger than padded input {:?}", kh, kw, sx)));
        }
        let bias = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [sw[0]] {
                    return Err(shape_err("conv2d", "bias", format!("expected [{}], got {:?}", sw[0], vb.shape())));
                }
                Some(vb)
            }
            None => None,
        };
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh,
            kw,
            stride,
            ph: pad.0,
            pw: pad.1,
            ho: (sx[2] + 2 * pad.0 - kh) / stride + 1,
            wo: (sx[3] + 2 * pad.1 - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(vx.data(), vw.data(), bias.as_ref().map(|b| b.data()), &geom);
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            "conv2d",
            Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            &inputs,
        )
    }

    /// Temporal convolution over `[N, C, L]` with a `[O, C, k]` kernel.
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 {
            return Err(shape_err("conv1d", "rank", format!("{:?} * {:?}", sx, sw)));
        }
        let x4 = self.reshape(x, vec![sx[0], sx[1], 1, sx[2]])?;
        let w4 = self.reshape(w, vec![sw[0], sw[1], 1, sw[2]])?;
        let y = self.conv2d_padded(x4, w4, b, 1, (0, padding))?;
        let sy = self.shape(y);
        self.reshape(y, vec![sy[0], sy[1], sy[3]])
    }

    /// Per-(n, c) normalization to zero mean and unit variance, no affine.
    pub fn instance_norm(&self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(shape_err("instance_norm", "rank", format!("expected [N,C,H,W], got {:?}", v.shape())));
        }
        let len = v.shape()[2] * v.shape()[3];
        if len < 2 {
            return Err(TensorError::Invalid {
                op: "instance_norm",
                detail: format!("degenerate statistics: H*W = {} < 2", len),
            });
        }
        let slices = v.shape()[0] * v.shape()[1];
        let (y, inv) = kernels::instance_norm_forward(v.data(), slices, len, eps);
        self.push(
            "instance_norm",
            Tensor::new(v.shape().to_vec(), y)?,
            Op::InstanceNorm { x: x.0, inv },
            &[x.0],
        )
    }

    /// Non-overlapping `k`×`k` average pooling; extents must divide by `k`.
    pub fn avg_pool2d(&self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() == 4 && k > 0 && (s[2] % k != 0 || s[3] % k != 0) {
            return Err(shape_err("avg_pool2d", "spatial", format!("{}x{} not divisible by {}", s[2], s[3], k)));
        }
        self.avg_pool2d_floor(x, k)
    }

    /// Like [`Graph::avg_pool2d`] but drops trailing rows/columns.
    pub fn avg_pool2d_floor(&self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(shape_err("avg_pool2d", "rank", format!("expected [N,C,H,W], got {:?}", s)));
        }
        if k == 0 || s[2] < k || s[3] < k {
            return Err(shape_err("avg_pool2d", "spatial", format!("window {} on {}x{}", k, s[2], s[3])));
        }
        let planes = s[0] * s[1];
        let out = kernels::avg_pool_forward(v.data(), planes, s[2], s[3], k);
        self.push(
            "avg_pool2d",
            Tensor::new(vec![s[0], s[1], s[2] / k, s[3] / k], out)?,
            Op::AvgPool { x: x.0, k },
            &[x.0],
        )
    }

    /// Bilinear lookup of `pts: [P, 2]` (x, y in cell units) in
    /// `fmap: [C, H, W]`, giving `[P, C]`. Coordinates are clamped to the
    /// valid rectangle.
    pub fn bilinear_sample(&self, fmap: Var, pts: Var) -> Result<Var> {
        let (sf, sp) = (self.shape(fmap), self.shape(pts));
        if sf.len() != 3 || sp.len() != 2 {
            return Err(shape_err("bilinear_sample", "rank", format!("fmap {:?}, pts {:?}", sf, sp)));
        }
        let f4 = self.reshape(fmap, vec![1, sf[0], sf[1], sf[2]])?;
        let p3 = self.reshape(pts, vec![1, sp[0], sp[1]])?;
        let y = self.bilinear_sample_batched(f4, p3)?;
        self.reshape(y, vec![sp[0], sf[0]])
    }

    /// Batched form: `fmaps: [B, C, H, W]`, `pts: [B, P, 2]` → `[B, P, C]`.
    pub fn bilinear_sample_batched(&self, fmaps: Var, pts: Var) -> Result<Var> {
        let (vf, vp) = (self.value(fmaps), self.value(pts));
        let (sf, sp) = (vf.shape(), vp.shape());
        if sf.len() != 4 || sp.len() != 3 {
            return Err(shape_err("bilinear_sample", "rank", format!("fmaps {:?}, pts {:?}", sf, sp)));
        }
        if sp[2] != 2 {
            return Err(shape_err("bilinear_sample", "point width", format!("expected 2, got {}", sp[2])));
        }
        if sf[0] != sp[0] {
            return Err(shape_err("bilinear_sample", "batch", format!("{} vs {}", sf[0], sp[0])));
        }
        if sf[2] == 0 || sf[3] == 0 {
            return Err(shape_err("bilinear_sample", "spatial", "empty feature map"));
        }
        let out = kernels::bilinear_forward(vf.data(), vp.data(), sf[0], sf[1], sf[2], sf[3], sp[1]);
        self.push(
            "bilinear_sample",
            Tensor::new(vec![sf[0], sp[1], sf[1]], out)?,
            Op::Bilinear {
                fmaps: fmaps.0,
                pts: pts.0,
            },
            &[fmaps.0, pts.0],
        )
    }

    /// Which side of every non-differentiable point the recorded values sit
    /// on: signs of relu and abs inputs, bilinear cells and clamping. Two
    /// evaluations of the same program with equal patterns lie in one smooth
    /// piece. Only ops that depend on grad-requiring leaves are included.
    pub fn kink_pattern(&self) -> Vec<i64> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    out.extend(nodes[*a].value.data().iter().map(|&v| (v > T::zero()) as i64 - (v < T::zero()) as i64))
                }
                Op::Bilinear { fmaps, pts } => {
                    let s = nodes[*fmaps].value.shape();
                    out.extend(kernels::bilinear_cells(nodes[*pts].value.data(), s[2], s[3]));
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar loss. Leaf gradients from any previous
    /// call are replaced.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = HashMap::new();

        let accum = |grads: &mut Vec<Option<Vec<T>>>, id: usize, contrib: Vec<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(contrib) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |id: usize| nodes[id].requires_grad;

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        leaf_grads.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *b, g.clone());
                    accum(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    accum(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if needs(*a) {
                        accum(&mut grads, *a, g.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect());
                    }
                    if needs(*b) {
                        accum(&mut grads, *b, g.iter().zip(va.data()).map(|(&g, &x)| g * x).collect());
                    }
                }
                Op::Scale(a, c) => accum(&mut grads, *a, g.iter().map(|&v| v * *c).collect()),
                Op::Relu(a) => {
                    let y = node.value.data();
                    accum(
                        &mut grads,
                        *a,
                        g.iter().zip(y).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect(),
                    );
                }
                Op::Abs(a) => {
                    let x = nodes[*a].value.data();
                    let contrib = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accum(&mut grads, *a, contrib);
                }
                Op::Sum(a) => accum(&mut grads, *a, vec![g[0]; nodes[*a].value.numel()]),
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    accum(&mut grads, *a, vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
                Op::Reshape(a) => accum(&mut grads, *a, g),
                Op::Permute(a, perm) => {
                    let inv = kernels::inverse_perm(perm);
                    accum(&mut grads, *a, kernels::permute(&g, node.value.shape(), &inv));
                }
                Op::Narrow { x, axis, start } => {
                    let xs = nodes[*x].value.shape();
                    let (outer, ext, inner) = kernels::axis_split(xs, *axis);
                    let len = node.value.shape()[*axis];
                    let mut d = vec![T::zero(); nodes[*x].value.numel()];
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accum(&mut grads, *x, d);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &x in xs {
                        let e = nodes[x].value.shape()[*axis];
                        if needs(x) {
                            let mut d = Vec::with_capacity(outer * e * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                d.extend_from_slice(&g[base..base + e * inner]);
                            }
                            accum(&mut grads, x, d);
                        }
                        offset += e;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let dim = node.value.shape()[1];
                    let mut d = vec![T::zero(); nodes[*x].value.numel()];
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for (a, &b) in d[i * dim..(i + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                                *a += b;
                            }
                        }
                    }
                    accum(&mut grads, *x, d);
                }
                Op::AddBroadcast { x, b, axis } => {
                    if needs(*b) {
                        let (outer, ext, inner) = kernels::axis_split(node.value.shape(), *axis);
                        let mut d = vec![T::zero(); ext];
                        for o in 0..outer {
                            for (e, de) in d.iter_mut().enumerate() {
                                *de += g[(o * ext + e) * inner..(o * ext + e + 1) * inner].iter().copied().sum::<T>();
                            }
                        }
                        accum(&mut grads, *b, d);
                    }
                    accum(&mut grads, *x, g);
                }
                Op::Matmul { a, b, ta, tb } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = mm_dims_unchecked(va.shape(), vb.shape(), *ta, *tb);
                    if needs(*a) {
                        let mut d = vec![T::zero(); m * k];
                        mm_grad_a(&g, vb.data(), m, k, n, *ta, *tb, &mut d);
                        accum(&mut grads, *a, d);
                    }
                    if needs(*b) {
                        let mut d = vec![T::zero(); k * n];
                        mm_grad_b(&g, va.data(), m, k, n, *ta, *tb, &mut d);
                        accum(&mut grads, *b, d);
                    }
                }
                Op::Bmm { a, b, ta, tb } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = mm_dims_unchecked(va.shape(), vb.shape(), *ta, *tb);
                    let bs = va.shape()[0];
                    if needs(*a) {
                        let mut d = vec![T::zero(); bs * m * k];
                        for i in 0..bs {
                            mm_grad_a(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb.data()[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                                *ta,
                                *tb,
                                &mut d[i * m * k..(i + 1) * m * k],
                            );
                        }
                        accum(&mut grads, *a, d);
                    }
                    if needs(*b) {
                        let mut d = vec![T::zero(); bs * k * n];
                        for i in 0..bs {
                            mm_grad_b(
                                &g[i * m * n..(i + 1) * m * n],
                                &va.data()[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                                *ta,
                                *tb,
                                &mut d[i * k * n..(i + 1) * k * n],
                            );
                        }
                        accum(&mut grads, *b, d);
                    }
                }
                Op::Softmax { x, axis } => {
                    let (o, l, i) = kernels::axis_split(node.value.shape(), *axis);
                    let mut d = vec![T::zero(); g.len()];
                    kernels::softmax_backward(node.value.data(), &g, o, l, i, &mut d);
                    accum(&mut grads, *x, d);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
                    let mut dx = needs(*x).then(|| vec![T::zero(); vx.numel()]);
                    let mut dw = needs(*w).then(|| vec![T::zero(); vw.numel()]);
                    let mut db = b.filter(|&b| needs(b)).map(|_| vec![T::zero(); geom.o]);
                    kernels::conv2d_backward(
                        vx.data(),
                        vw.data(),
                        &g,
                        geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(d) = dx {
                        accum(&mut grads, *x, d);
                    }
                    if let Some(d) = dw {
                        accum(&mut grads, *w, d);
                    }
                    if let (Some(b), Some(d)) = (b, db) {
                        accum(&mut grads, *b, d);
                    }
                }
                Op::InstanceNorm { x, inv } => {
                    let s = node.value.shape();
                    let len = s[2] * s[3];
                    let mut d = vec![T::zero(); g.len()];
                    kernels::instance_norm_backward(node.value.data(), inv, &g, len, &mut d);
                    accum(&mut grads, *x, d);
                }
                Op::AvgPool { x, k } => {
                    let s = nodes[*x].value.shape();
                    let mut d = vec![T::zero(); nodes[*x].value.numel()];
                    kernels::avg_pool_backward(&g, s[0] * s[1], s[2], s[3], *k, &mut d);
                    accum(&mut grads, *x, d);
                }
                Op::Bilinear { fmaps, pts } => {
                    let (vf, vp) = (&nodes[*fmaps].value, &nodes[*pts].value);
                    let sf = vf.shape();
                    let dims = (sf[0], sf[1], sf[2], sf[3], vp.shape()[1]);
                    let mut df = needs(*fmaps).then(|| vec![T::zero(); vf.numel()]);
                    let mut dp = needs(*pts).then(|| vec![T::zero(); vp.numel()]);
                    kernels::bilinear_backward(vf.data(), vp.data(), &g, dims, df.as_deref_mut(), dp.as_deref_mut());
                    if let Some(d) = df {
                        accum(&mut grads, *fmaps, d);
                    }
                    if let Some(d) = dp {
                        accum(&mut grads, *pts, d);
                    }
                }
            }
        }
        *self.grads.borrow_mut() = leaf_grads;
        Ok(())
    }
}

fn mm_dims_unchecked(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> (usize, usize, usize) {
    let r = sa.len();
    let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
    let n = if tb { sb[r - 2] } else { sb[r - 1] };
    (m, k, n)
}

// C = A'B' with A' = op(A) [m,k], B' = op(B) [k,n]; G = dC.
#[allow(clippy::too_many_arguments)]
fn mm_grad_a<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool, d: &mut [T]) {
    if ta {
        // dA = B' G^T, stored [k, m]
        T::gemm(tb, true, k, m, n, T::one(), b, g, T::zero(), d);
    } else {
        // dA = G B'^T, stored [m, k]
        T::gemm(false, !tb, m, k, n, T::one(), g, b, T::zero(), d);
    }
}

#[allow(clippy::too_many_arguments)]
fn mm_grad_b<T: Real>(g: &[T], a: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool, d: &mut [T]) {
    if tb {
        // dB = G^T A', stored [n, k]
        T::gemm(true, ta, n, k, m, T::one(), g, a, T::zero(), d);
    } else {
        // dB = A'^T G, stored [k, n]
        T::gemm(!ta, false, k, n, m, T::one(), a, g, T::zero(), d);
    }
}
