//! Windowed contextual attention.
//!
//! The feature map is cut into non-overlapping `M×M` patches. Each patch's
//! tokens are queries; the tokens of the 3×3 block of patches around it
//! (itself included) serve as both keys and values after a shared
//! projection. Patches missing at the border contribute zero tokens. Every
//! patch of a layer reads the layer's input snapshot, so patch order is
//! irrelevant.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{BoundParams, Graph, ParamStore, Real, Result, Tensor, TensorError, Var};

/// Graph handles for one attention layer. Heads are stored side by side:
/// head `j` owns output columns `j·d_proj .. (j+1)·d_proj` of `q_w` and
/// `kv_w`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayerVars {
    pub q_w: Var,
    pub q_b: Var,
    pub kv_w: Var,
    pub kv_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl AttentionLayerVars {
    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            q_w: p.get(&format!("{prefix}.q.w"))?,
            q_b: p.get(&format!("{prefix}.q.b"))?,
            kv_w: p.get(&format!("{prefix}.kv.w"))?,
            kv_b: p.get(&format!("{prefix}.kv.b"))?,
            out_w: p.get(&format!("{prefix}.out.w"))?,
            out_b: p.get(&format!("{prefix}.out.b"))?,
        })
    }
}

/// Query/key-value projections get fan-in scaled uniform noise; the output
/// projection starts at zero.
pub fn init_attention_params<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
) -> Result<()> {
    let bound = 1.0 / (d as f64).sqrt();
    let mut uni = |shape: Vec<usize>| Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)));
    store.insert(format!("{prefix}.q.w"), uni(vec![d, d]))?;
    store.insert(format!("{prefix}.q.b"), uni(vec![d]))?;
    store.insert(format!("{prefix}.kv.w"), uni(vec![d, d]))?;
    store.insert(format!("{prefix}.kv.b"), uni(vec![d]))?;
    store.insert(format!("{prefix}.out.w"), Tensor::zeros(vec![d, d]))?;
    store.insert(format!("{prefix}.out.b"), Tensor::zeros(vec![d]))?;
    Ok(())
}

/// Row gathers that map between the `[n·h·w, d]` token layout and the
/// patch-major query/neighbourhood layouts.
struct PatchIndex {
    patches: usize,
    query: Arc<Vec<Option<usize>>>,
    neighbourhood: Arc<Vec<Option<usize>>>,
    scatter_back: Arc<Vec<Option<usize>>>,
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        return i;
    }
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

impl PatchIndex {
    fn new(n: usize, h: usize, w: usize, m: usize) -> Self {
        let (ph, pw) = (h.div_ceil(m), w.div_ceil(m));
        let mm = m * m;
        let patches = n * ph * pw;
        let row = |b: usize, y: usize, x: usize| b * h * w + reflect(y, h) * w + reflect(x, w);
        let mut query = Vec::with_capacity(patches * mm);
        let mut neighbourhood = Vec::with_capacity(patches * 9 * mm);
        for b in 0..n {
            for py in 0..ph {
                for px in 0..pw {
                    for iy in 0..m {
                        for ix in 0..m {
                            query.push(Some(row(b, py * m + iy, px * m + ix)));
                        }
                    }
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (qy, qx) = (py as isize + dy, px as isize + dx);
                            let inside = qy >= 0 && qx >= 0 && (qy as usize) < ph && (qx as usize) < pw;
                            for iy in 0..m {
                                for ix in 0..m {
                                    neighbourhood.push(inside.then(|| {
                                        row(b, qy as usize * m + iy, qx as usize * m + ix)
                                    }));
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut scatter_back = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let patch = (b * ph + y / m) * pw + x / m;
                    scatter_back.push(Some(patch * mm + (y % m) * m + x % m));
                }
            }
        }
        Self {
            patches,
            query: Arc::new(query),
            neighbourhood: Arc::new(neighbourhood),
            scatter_back: Arc::new(scatter_back),
        }
    }
}

/// Applies the attention stack to `fmaps: [N, d, h, w]`.
pub fn contextual_attention_batched<T: Real>(
    g: &Graph<T>,
    fmaps: Var,
    layers: &[AttentionLayerVars],
    patch: usize,
    heads: usize,
    residual: bool,
) -> Result<Var> {
    let s = g.shape(fmaps);
    if s.len() != 4 {
        return Err(crate::tensor::TensorError::Invalid {
            op: "contextual_attention",
            detail: format!("expected [N,d,h,w], got {:?}", s),
        });
    }
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Invalid {
            op: "contextual_attention",
            detail: format!("channels {} not divisible by {} heads", d, heads),
        });
    }
    if patch == 0 {
        return Err(TensorError::Invalid {
            op: "contextual_attention",
            detail: "patch size must be >= 1".into(),
        });
    }
    if layers.is_empty() {
        return Ok(fmaps);
    }
    let dp = d / heads;
    let mm = patch * patch;
    let idx = PatchIndex::new(n, h, w, patch);
    let p = idx.patches;
    let scale = T::one() / T::from_usize(dp).unwrap().sqrt();

    let hwd = g.permute(fmaps, &[0, 2, 3, 1])?;
    let mut tokens = g.reshape(hwd, vec![n * h * w, d])?;
    for layer in layers {
        let q = g.gather_rows(tokens, idx.query.clone())?;
        let v = g.gather_rows(tokens, idx.neighbourhood.clone())?;
        let q = g.linear(q, layer.q_w, Some(layer.q_b))?;
        let v = g.linear(v, layer.kv_w, Some(layer.kv_b))?;
        // split heads: [P, L, heads, dp] -> [P·heads, L, dp]
        let q = g.reshape(q, vec![p, mm, heads, dp])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let q = g.reshape(q, vec![p * heads, mm, dp])?;
        let v = g.reshape(v, vec![p, 9 * mm, heads, dp])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let v = g.reshape(v, vec![p * heads, 9 * mm, dp])?;
        let scores = g.bmm(q, v, false, true)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 2)?;
        let heads_out = g.bmm(attn, v, false, false)?;
        let merged = g.reshape(heads_out, vec![p, heads, mm, dp])?;
        let merged = g.permute(merged, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, vec![p * mm, d])?;
        let out = g.linear(merged, layer.out_w, Some(layer.out_b))?;
        let out = g.gather_rows(out, idx.scatter_back.clone())?;
        tokens = if residual { g.add(tokens, out)? } else { out };
    }
    let t = g.reshape(tokens, vec![n, h, w, d])?;
    g.permute(t, &[0, 3, 1, 2])
}

/// Single-map form on `[d, h, w]`.
pub fn contextual_attention<T: Real>(
    g: &Graph<T>,
    fmap: Var,
    layers: &[AttentionLayerVars],
    patch: usize,
    heads: usize,
    residual: bool,
) -> Result<Var> {
    let s = g.shape(fmap);
    if s.len() != 3 {
        return Err(TensorError::Invalid {
            op: "contextual_attention",
            detail: format!("expected [d,h,w], got {:?}", s),
        });
    }
    let x = g.reshape(fmap, vec![1, s[0], s[1], s[2]])?;
    let y = contextual_attention_batched(g, x, layers, patch, heads, residual)?;
    g.reshape(y, s)
}
