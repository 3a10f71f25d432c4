//! Raw forward/backward kernels on flat buffers. Shapes are validated by the
//! graph layer before these run.

use super::{strides_of, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let npx = g.out_px();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npx..(row + 1) * npx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let npx = g.out_px();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npx..(row + 1) * npx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let npx = g.out_px();
    let ckk = g.ckk();
    let mut out = vec![T::zero(); g.n * g.o * npx];
    let mut cols = vec![T::zero(); ckk * npx];
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        im2col(xn, g, &mut cols);
        let on = &mut out[n * g.o * npx..(n + 1) * g.o * npx];
        T::gemm(false, false, g.o, npx, ckk, T::one(), w, &cols, T::zero(), on);
        if let Some(b) = bias {
            for (o, bo) in b.iter().enumerate() {
                for v in on[o * npx..(o + 1) * npx].iter_mut() {
                    *v += *bo;
                }
            }
        }
    }
    out
}

/// Accumulates into whichever of `dx`, `dw`, `db` are present.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let npx = g.out_px();
    let ckk = g.ckk();
    if let Some(db) = db {
        for n in 0..g.n {
            for o in 0..g.o {
                let s: T = gout[(n * g.o + o) * npx..(n * g.o + o + 1) * npx].iter().copied().sum();
                db[o] += s;
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut cols = vec![T::zero(); ckk * npx];
    let mut dcols = vec![T::zero(); ckk * npx];
    for n in 0..g.n {
        let gn = &gout[n * g.o * npx..(n + 1) * g.o * npx];
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            im2col(xn, g, &mut cols);
            T::gemm(false, true, g.o, ckk, npx, T::one(), gn, &cols, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(true, false, ckk, npx, g.o, T::one(), w, gn, T::zero(), &mut dcols);
            let dxn = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            col2im(&dcols, g, dxn);
        }
    }
}

/// Returns normalized output and per-slice inverse standard deviation.
pub(crate) fn instance_norm_forward<T: Real>(x: &[T], slices: usize, len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); slices];
    let nf = T::from_usize(len).unwrap();
    for s in 0..slices {
        let xs = &x[s * len..(s + 1) * len];
        let mean = xs.iter().copied().sum::<T>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv[s] = is;
        for (o, &v) in y[s * len..(s + 1) * len].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    (y, inv)
}

pub(crate) fn instance_norm_backward<T: Real>(y: &[T], inv: &[T], gout: &[T], len: usize, dx: &mut [T]) {
    let nf = T::from_usize(len).unwrap();
    for (s, &is) in inv.iter().enumerate() {
        let ys = &y[s * len..(s + 1) * len];
        let gs = &gout[s * len..(s + 1) * len];
        let mg = gs.iter().copied().sum::<T>() / nf;
        let mgy = gs.iter().zip(ys).map(|(&g, &y)| g * y).sum::<T>() / nf;
        for ((d, &g), &yv) in dx[s * len..(s + 1) * len].iter_mut().zip(gs).zip(ys) {
            *d += is * (g - mg - yv * mgy);
        }
    }
}

/// Non-overlapping `k`×`k` average pooling on `[planes, h, w]`, dropping any
/// remainder rows/columns.
pub(crate) fn avg_pool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..k {
                    let row = &xp[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    s += row.iter().copied().sum::<T>();
                }
                op[oy * wo + ox] = s * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(gout: &[T], planes: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gout[(p * ho + oy) * wo + ox] * scale;
                for dy in 0..k {
                    for dx_ in 0..k {
                        dx[p * h * w + (oy * k + dy) * w + ox * k + dx_] += g;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Corner {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

fn corner<T: Real>(px: T, py: T, h: usize, w: usize) -> Corner {
    let px = px.to_f64().unwrap();
    let py = py.to_f64().unwrap();
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    let x = px.clamp(0.0, xmax);
    let y = py.clamp(0.0, ymax);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    Corner {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        wx: x - x0 as f64,
        wy: y - y0 as f64,
        clamped_x: !(0.0..=xmax).contains(&px),
        clamped_y: !(0.0..=ymax).contains(&py),
    }
}

/// Cell and clamp state of each point; the lookup is smooth while this is unchanged.
pub(crate) fn bilinear_cells<T: Real>(pts: &[T], h: usize, w: usize) -> impl Iterator<Item = i64> + '_ {
    pts.chunks_exact(2).map(move |q| {
        let k = corner(q[0], q[1], h, w);
        ((k.y0 * w + k.x0) as i64) << 2 | (k.clamped_x as i64) << 1 | k.clamped_y as i64
    })
}

/// `fmaps: [b, c, h, w]`, `pts: [b, p, 2]` as (x, y) → `[b, p, c]`.
pub(crate) fn bilinear_forward<T: Real>(fmaps: &[T], pts: &[T], b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * p * c];
    let hw = h * w;
    for bi in 0..b {
        let f = &fmaps[bi * c * hw..(bi + 1) * c * hw];
        for pi in 0..p {
            let q = (bi * p + pi) * 2;
            let k = corner(pts[q], pts[q + 1], h, w);
            let w00 = T::lit((1.0 - k.wx) * (1.0 - k.wy));
            let w10 = T::lit(k.wx * (1.0 - k.wy));
            let w01 = T::lit((1.0 - k.wx) * k.wy);
            let w11 = T::lit(k.wx * k.wy);
            let (i00, i10, i01, i11) = (k.y0 * w + k.x0, k.y0 * w + k.x1, k.y1 * w + k.x0, k.y1 * w + k.x1);
            let o = &mut out[(bi * p + pi) * c..(bi * p + pi + 1) * c];
            for (ci, ov) in o.iter_mut().enumerate() {
                let fc = &f[ci * hw..(ci + 1) * hw];
                *ov = w00 * fc[i00] + w10 * fc[i10] + w01 * fc[i01] + w11 * fc[i11];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward<T: Real>(
    fmaps: &[T],
    pts: &[T],
    gout: &[T],
    dims: (usize, usize, usize, usize, usize),
    mut dfmap: Option<&mut [T]>,
    mut dpts: Option<&mut [T]>,
) {
    let (b, c, h, w, p) = dims;
    let hw = h * w;
    for bi in 0..b {
        for pi in 0..p {
            let q = (bi * p + pi) * 2;
            let k = corner(pts[q], pts[q + 1], h, w);
            let (i00, i10, i01, i11) = (k.y0 * w + k.x0, k.y0 * w + k.x1, k.y1 * w + k.x0, k.y1 * w + k.x1);
            let g = &gout[(bi * p + pi) * c..(bi * p + pi + 1) * c];
            if let Some(df) = dfmap.as_deref_mut() {
                let w00 = T::lit((1.0 - k.wx) * (1.0 - k.wy));
                let w10 = T::lit(k.wx * (1.0 - k.wy));
                let w01 = T::lit((1.0 - k.wx) * k.wy);
                let w11 = T::lit(k.wx * k.wy);
                let d = &mut df[bi * c * hw..(bi + 1) * c * hw];
                for (ci, &gv) in g.iter().enumerate() {
                    let dc = &mut d[ci * hw..(ci + 1) * hw];
                    dc[i00] += w00 * gv;
                    dc[i10] += w10 * gv;
                    dc[i01] += w01 * gv;
                    dc[i11] += w11 * gv;
                }
            }
            if let Some(dp) = dpts.as_deref_mut() {
                let f = &fmaps[bi * c * hw..(bi + 1) * c * hw];
                let (wx, wy) = (T::lit(k.wx), T::lit(k.wy));
                let mut gx = T::zero();
                let mut gy = T::zero();
                for (ci, &gv) in g.iter().enumerate() {
                    let fc = &f[ci * hw..(ci + 1) * hw];
                    let (f00, f10, f01, f11) = (fc[i00], fc[i10], fc[i01], fc[i11]);
                    gx += gv * ((T::one() - wy) * (f10 - f00) + wy * (f11 - f01));
                    gy += gv * ((T::one() - wx) * (f01 - f00) + wx * (f11 - f10));
                }
                if !k.clamped_x {
                    dp[q] += gx;
                }
                if !k.clamped_y {
                    dp[q + 1] += gy;
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for a in 0..len {
                m = m.max(x[base + a * inner]);
            }
            let mut s = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - m).exp();
                y[base + a * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for a in 0..len {
                y[base + a * inner] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], gout: &[T], outer: usize, len: usize, inner: usize, dx: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot += y[base + a * inner] * gout[base + a * inner];
            }
            for a in 0..len {
                let idx = base + a * inner;
                dx[idx] += y[idx] * (gout[idx] - dot);
            }
        }
    }
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let inner = if rank == 0 { 1 } else { out_shape[rank - 1] };
    let inner_stride = if rank == 0 { 0 } else { src_strides[rank - 1] };
    let rows = x.len() / inner.max(1);
    for _ in 0..rows {
        let base: usize = (0..rank.saturating_sub(1)).map(|a| idx[a] * src_strides[a]).sum();
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        // advance all but the last axis
        for a in (0..rank.saturating_sub(1)).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
