//! Iterative point tracker.
//!
//! A window of `T_w` frames is encoded, every track starts at its query
//! point in all frames, and `K` refinement iterations each predict a
//! per-frame offset from multi-scale correlation features and the previous
//! iteration's motion. Long videos are processed as windows that overlap by
//! one frame.
//!
//! The first frame of a window is held fixed: in the first window it is the
//! query frame, afterwards it is the previous window's last frame.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig, FeatureMap};
use crate::tensor::{BoundParams, Graph, ParamStore, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub window_len: usize,
    pub iters: usize,
    pub corr_scales: usize,
    pub corr_radius: usize,
    pub recent_lags: Vec<usize>,
    pub update_blocks: usize,
    pub update_hidden: usize,
    pub update_kernel: usize,
    /// Stop gradients from flowing into positions through feature lookups.
    pub detach_sample_positions: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrackerConfig {
    pub fn desk() -> Self {
        Self {
            window_len: 8,
            iters: 3,
            corr_scales: 4,
            corr_radius: 1,
            recent_lags: vec![2, 4],
            update_blocks: 2,
            update_hidden: 32,
            update_kernel: 3,
            detach_sample_positions: true,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            window_len: 24,
            update_blocks: 8,
            update_hidden: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::config("tracker.iters must be >= 1"));
        }
        if self.corr_scales == 0 {
            return Err(Error::config("tracker.corr_scales must be >= 1"));
        }
        if self.window_len < 2 {
            return Err(Error::config("tracker.window_len must be >= 2"));
        }
        if self.recent_lags.iter().any(|&l| l == 0) {
            return Err(Error::config("tracker.recent_lags must be positive"));
        }
        if self.update_hidden == 0 || self.update_kernel % 2 == 0 {
            return Err(Error::config("tracker.update_hidden must be >= 1 and update_kernel odd"));
        }
        Ok(())
    }

    pub fn query_slots(&self) -> usize {
        1 + self.recent_lags.len()
    }

    pub fn offsets(&self) -> usize {
        (2 * self.corr_radius + 1).pow(2)
    }

    /// Width of the correlation part of the update-network input.
    pub fn corr_width(&self) -> usize {
        self.query_slots() * self.corr_scales * self.offsets()
    }

    pub fn input_width(&self) -> usize {
        self.corr_width() + 2
    }

    fn max_lag(&self) -> usize {
        self.recent_lags.iter().copied().max().unwrap_or(0)
    }
}

/// Per-window state: positions of every iteration plus query features.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState<T> {
    /// `K + 1` entries of `[T_w, N, 2]` pixels; entry 0 is the initialization.
    pub positions: Vec<Tensor<T>>,
    /// `[N, d]`
    pub query_feat: Tensor<T>,
    /// `[T_w, N, d]`, sampled at the latest positions.
    pub recent_feats: Tensor<T>,
}

/// Feature maps of a window at `corr_scales` resolutions.
#[derive(Clone, Debug)]
pub struct CorrPyramid {
    /// Level `ℓ` is `[T_w, d, h/2^ℓ, w/2^ℓ]`.
    pub levels: Vec<Var>,
    pub stride: usize,
}

impl CorrPyramid {
    pub fn build<T: Real>(g: &Graph<T>, fmaps: Var, scales: usize, stride: usize) -> Result<Self> {
        let mut levels = vec![fmaps];
        for _ in 1..scales {
            let prev = *levels.last().expect("level 0 present");
            levels.push(g.avg_pool2d_floor(prev, 2)?);
        }
        Ok(Self { levels, stride })
    }
}

/// Correlation features for every (frame, track).
///
/// `queries: [T_w·N, Q, d]` holds the query features for each frame/track
/// row, `pts: [T_w, N, 2]` pixel positions. Returns `[T_w·N, Q·L·O]`
/// ordered query-major, then scale, then offset (row-major over the
/// `(2r+1)²` grid).
pub fn sample_correlation<T: Real>(
    g: &Graph<T>,
    pyr: &CorrPyramid,
    queries: Var,
    pts: Var,
    radius: usize,
) -> Result<Var> {
    let ps = g.shape(pts);
    let qs = g.shape(queries);
    if ps.len() != 3 || ps[2] != 2 || qs.len() != 3 || qs[0] != ps[0] * ps[1] {
        return Err(Error::config(format!(
            "sample_correlation: queries {:?} do not match points {:?}",
            qs, ps
        )));
    }
    let (tw, n, nq) = (ps[0], ps[1], qs[1]);
    let side = 2 * radius + 1;
    let o = side * side;
    let repeat: Arc<Vec<Option<usize>>> = Arc::new((0..tw * n * o).map(|j| Some(j / o)).collect());
    let offsets = Tensor::from_fn(vec![tw * n * o, 2], |j| {
        let k = (j / 2) % o;
        let r = radius as f64;
        T::lit(if j % 2 == 0 { (k % side) as f64 - r } else { (k / side) as f64 - r })
    });
    let offsets = g.constant(offsets);
    let flat = g.reshape(pts, vec![tw * n, 2])?;
    let expanded = g.gather_rows(flat, repeat)?;
    let mut per_level = Vec::with_capacity(pyr.levels.len());
    for (l, &level) in pyr.levels.iter().enumerate() {
        let scale = T::lit(1.0 / (pyr.stride * (1 << l)) as f64);
        let cell = g.add(g.scale(expanded, scale)?, offsets)?;
        let cell = g.reshape(cell, vec![tw, n * o, 2])?;
        let samples = g.bilinear_sample_batched(level, cell)?;
        let d = g.shape(samples)[2];
        let samples = g.reshape(samples, vec![tw * n, o, d])?;
        let c = g.bmm(queries, samples, false, true)?;
        per_level.push(g.reshape(c, vec![tw * n, nq, 1, o])?);
    }
    let all = g.concat(&per_level, 2)?;
    Ok(g.reshape(all, vec![tw * n, nq * pyr.levels.len() * o])?)
}

fn check_queries(queries: &[[f64; 2]], height: usize, width: usize) -> Result<()> {
    for (i, q) in queries.iter().enumerate() {
        let inside = q[0].is_finite()
            && q[1].is_finite()
            && q[0] >= 0.0
            && q[1] >= 0.0
            && q[0] <= (width - 1) as f64
            && q[1] <= (height - 1) as f64;
        if !inside {
            return Err(Error::config(format!(
                "query {} at ({}, {}) lies outside the {}x{} frame",
                i, q[0], q[1], width, height
            )));
        }
    }
    Ok(())
}

fn broadcast_points<T: Real>(points: &[[f64; 2]], frames: usize) -> Tensor<T> {
    let n = points.len();
    Tensor::from_fn(vec![frames, n, 2], |j| T::lit(points[(j / 2) % n][j % 2]))
}

/// Positions constant at the query, query features sampled from `F₁`.
pub fn init_tracks<T: Real>(queries: &[[f64; 2]], f1: &FeatureMap<T>, window_len: usize) -> Result<TrackState<T>> {
    let s = f1.data.shape();
    if s.len() != 3 {
        return Err(Error::config(format!("feature map must be [d,h,w], got {:?}", s)));
    }
    check_queries(queries, s[1] * f1.stride, s[2] * f1.stride)?;
    let n = queries.len();
    let g = Graph::new();
    let fmap = g.constant(f1.data.clone());
    let inv = 1.0 / f1.stride as f64;
    let pts = Tensor::from_fn(vec![n, 2], |j| T::lit(queries[j / 2][j % 2] * inv));
    let feat = g.bilinear_sample(fmap, g.constant(pts))?;
    let query_feat = (*g.value(feat)).clone();
    let d = s[0];
    let recent = Tensor::from_fn(vec![window_len, n, d], |j| query_feat.data()[j % (n * d)]);
    Ok(TrackState {
        positions: vec![broadcast_points(queries, window_len)],
        query_feat,
        recent_feats: recent,
    })
}

/// Graph handles produced by one window.
#[derive(Clone, Debug)]
pub struct WindowOutput {
    /// `K + 1` entries of `[T_w, N, 2]`.
    pub positions: Vec<Var>,
    /// Mean |Δp| of each iteration.
    pub deltas: Vec<f64>,
}

/// Encoder plus update network.
#[derive(Clone, Debug)]
pub struct Tracker {
    encoder: Encoder,
    cfg: TrackerConfig,
}

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

impl Tracker {
    pub fn new(encoder: EncoderConfig, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: Encoder::new(encoder)?,
            cfg,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// SHA-256 over both configurations.
    pub fn config_hash(&self) -> [u8; 32] {
        let text = serde_json::to_string(&(self.encoder.config(), &self.cfg)).expect("configs serialize");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.encoder.init_params(store, rng)?;
        let c = &self.cfg;
        let (h, k) = (c.update_hidden, c.update_kernel);
        let conv = |store: &mut ParamStore<T>, rng: &mut R, name: &str, inp: usize| -> Result<()> {
            store.insert(format!("{name}.w"), uniform(rng, vec![h, inp, k], inp * k))?;
            store.insert(format!("{name}.b"), uniform(rng, vec![h], inp * k))?;
            Ok(())
        };
        conv(store, rng, "upd.stem", c.input_width())?;
        for b in 0..c.update_blocks {
            conv(store, rng, &format!("upd.b{b}.conv1"), h)?;
            conv(store, rng, &format!("upd.b{b}.conv2"), h)?;
        }
        store.insert("upd.head.w", Tensor::zeros(vec![h, 2]))?;
        store.insert("upd.head.b", Tensor::zeros(vec![2]))?;
        Ok(())
    }

    /// Names of the update-network parameters.
    pub fn is_update_param(name: &str) -> bool {
        name.starts_with("upd.")
    }

    /// `[N, C_in, T_w]` → `[T_w, N, 2]`.
    fn update_net<T: Real>(&self, g: &Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let c = &self.cfg;
        let pad = c.update_kernel / 2;
        let conv = |name: &str, x: Var| -> Result<Var> {
            let w = p.get(&format!("{name}.w"))?;
            let b = p.get(&format!("{name}.b"))?;
            Ok(g.conv1d(x, w, Some(b), pad)?)
        };
        let mut h = g.relu(conv("upd.stem", x)?)?;
        for b in 0..c.update_blocks {
            let y = g.relu(conv(&format!("upd.b{b}.conv1"), h)?)?;
            let y = conv(&format!("upd.b{b}.conv2"), y)?;
            h = g.relu(g.add(h, y)?)?;
        }
        let s = g.shape(h);
        let (n, hid, tw) = (s[0], s[1], s[2]);
        let rows = g.reshape(g.permute(h, &[0, 2, 1])?, vec![n * tw, hid])?;
        let out = g.linear(rows, p.get("upd.head.w")?, Some(p.get("upd.head.b")?))?;
        let out = g.reshape(out, vec![n, tw, 2])?;
        Ok(g.permute(out, &[1, 0, 2])?)
    }

    /// Runs `K` iterations on encoded frames `fmaps: [T_w, d, h, w]`.
    ///
    /// `init: [T_w, N, 2]` pixels, `query_feat: [N, d]`. `history` holds
    /// features (each `[N, d]`) of the frames just before the window,
    /// oldest first, used when a lag reaches past the window start.
    pub fn run_window<T: Real>(
        &self,
        g: &Graph<T>,
        p: &BoundParams,
        fmaps: Var,
        init: Tensor<T>,
        query_feat: Var,
        history: &[Tensor<T>],
    ) -> Result<WindowOutput> {
        let c = &self.cfg;
        let fs = g.shape(fmaps);
        let is = init.shape().to_vec();
        if fs.len() != 4 || is.len() != 3 || is[0] != fs[0] || is[2] != 2 {
            return Err(Error::config(format!(
                "run_window: feature maps {:?} and initial positions {:?} disagree",
                fs, is
            )));
        }
        let (tw, d, n) = (fs[0], fs[1], is[1]);
        let stride = self.encoder.config().downsample;
        let pyr = CorrPyramid::build(g, fmaps, c.corr_scales, stride)?;
        let nq = c.query_slots();
        let corr_scale = T::lit(1.0 / (d as f64).sqrt());

        let hist_len = history.len();
        let mut table_parts = vec![query_feat];
        for h in history {
            table_parts.push(g.constant(h.clone()));
        }
        // query-slot gathers into [f1; history; recent]
        let lag_index = |t: usize, i: usize, lag: usize| -> usize {
            let global = hist_len + t;
            let src = global.saturating_sub(lag);
            n + src * n + i
        };
        let first_idx: Arc<Vec<Option<usize>>> = Arc::new(
            (0..tw * n * nq)
                .map(|j| (j % nq == 0).then_some((j / nq) % n))
                .collect(),
        );
        let later_idx: Arc<Vec<Option<usize>>> = Arc::new(
            (0..tw * n * nq)
                .map(|j| {
                    let (row, q) = (j / nq, j % nq);
                    let (t, i) = (row / n, row % n);
                    Some(if q == 0 { i } else { lag_index(t, i, c.recent_lags[q - 1]) })
                })
                .collect(),
        );
        let mask = g.constant(Tensor::from_fn(vec![tw, n, 2], |j| {
            if j < 2 * n {
                T::zero()
            } else {
                T::one()
            }
        }));
        let inv_stride = T::lit(1.0 / stride as f64);

        let mut positions = vec![g.constant(init)];
        let mut deltas = Vec::with_capacity(c.iters);
        for k in 1..=c.iters {
            let cur = positions[k - 1];
            let sample_at = if c.detach_sample_positions { g.detach(cur) } else { cur };
            let queries = if k == 1 {
                let table = g.concat(&[query_feat], 0)?;
                g.gather_rows(table, first_idx.clone())?
            } else {
                let cell = g.scale(sample_at, inv_stride)?;
                let recent = g.bilinear_sample_batched(fmaps, cell)?;
                let recent = g.reshape(recent, vec![tw * n, d])?;
                let mut parts = table_parts.clone();
                parts.push(recent);
                let table = g.concat(&parts, 0)?;
                g.gather_rows(table, later_idx.clone())?
            };
            let queries = g.reshape(queries, vec![tw * n, nq, d])?;
            let corr = sample_correlation(g, &pyr, queries, sample_at, c.corr_radius)?;
            let corr = g.scale(corr, corr_scale)?;
            let motion = if k == 1 {
                g.constant(Tensor::zeros(vec![tw * n, 2]))
            } else {
                g.reshape(g.sub(cur, positions[k - 2])?, vec![tw * n, 2])?
            };
            let x = g.concat(&[corr, motion], 1)?;
            let x = g.reshape(x, vec![tw, n, c.input_width()])?;
            let x = g.permute(x, &[1, 2, 0])?;
            let delta = self.update_net(g, p, x)?;
            let delta = g.mul(delta, mask)?;
            let dv = g.value(delta);
            let mean_abs = dv.data().iter().map(|v| v.to_f64().unwrap().abs()).sum::<f64>() / dv.numel().max(1) as f64;
            deltas.push(mean_abs);
            positions.push(g.add(cur, delta)?);
        }
        Ok(WindowOutput { positions, deltas })
    }

    /// Encodes `frames: [T_w, 3, H, W]` and tracks `queries` on its first
    /// frame, recording everything on `g`.
    pub fn forward_window<T: Real>(
        &self,
        g: &Graph<T>,
        p: &BoundParams,
        frames: Var,
        queries: &[[f64; 2]],
    ) -> Result<WindowOutput> {
        Ok(self.forward_window_parts(g, p, frames, queries)?.2)
    }

    fn forward_window_parts<T: Real>(
        &self,
        g: &Graph<T>,
        p: &BoundParams,
        frames: Var,
        queries: &[[f64; 2]],
    ) -> Result<(Var, Var, WindowOutput)> {
        let s = g.shape(frames);
        if s.len() != 4 {
            return Err(Error::config(format!("frames must be [T,3,H,W], got {:?}", s)));
        }
        check_queries(queries, s[2], s[3])?;
        let fmaps = self.encoder.forward(g, p, frames)?;
        let f1 = self.sample_query_feat(g, fmaps, queries)?;
        let out = self.run_window(g, p, fmaps, broadcast_points(queries, s[0]), f1, &[])?;
        Ok((fmaps, f1, out))
    }

    /// Batched training form: `frames: [B·T_w, 3, H, W]` holds `B`
    /// consecutive windows; `queries[b]` are the first-frame points of
    /// window `b`. The encoder runs once over all frames.
    pub fn forward_windows<T: Real>(
        &self,
        g: &Graph<T>,
        p: &BoundParams,
        frames: Var,
        queries: &[Vec<[f64; 2]>],
    ) -> Result<Vec<WindowOutput>> {
        let s = g.shape(frames);
        let b = queries.len();
        if s.len() != 4 || b == 0 || s[0] % b != 0 {
            return Err(Error::config(format!(
                "{} query sets do not split frames {:?} into windows",
                b, s
            )));
        }
        let tw = s[0] / b;
        for q in queries {
            check_queries(q, s[2], s[3])?;
        }
        let fmaps = self.encoder.forward(g, p, frames)?;
        let mut outs = Vec::with_capacity(b);
        for (k, q) in queries.iter().enumerate() {
            let fm = g.narrow(fmaps, 0, k * tw, tw)?;
            let f1 = self.sample_query_feat(g, fm, q)?;
            outs.push(self.run_window(g, p, fm, broadcast_points(q, tw), f1, &[])?);
        }
        Ok(outs)
    }

    fn sample_query_feat<T: Real>(&self, g: &Graph<T>, fmaps: Var, queries: &[[f64; 2]]) -> Result<Var> {
        let fs = g.shape(fmaps);
        let first = g.reshape(g.narrow(fmaps, 0, 0, 1)?, vec![fs[1], fs[2], fs[3]])?;
        let inv = 1.0 / self.encoder.config().downsample as f64;
        let pts = Tensor::from_fn(vec![queries.len(), 2], |j| T::lit(queries[j / 2][j % 2] * inv));
        Ok(g.bilinear_sample(first, g.constant(pts))?)
    }

    /// Tracks on a single window without gradients.
    pub fn track_window<T: Real>(
        &self,
        params: &ParamStore<T>,
        frames: &Tensor<T>,
        queries: &[[f64; 2]],
    ) -> Result<(TrackState<T>, Vec<f64>)> {
        let g = Graph::new();
        let p = params.bind(&g, false);
        let (fmaps, f1, out) = self.forward_window_parts(&g, &p, g.constant(frames.clone()), queries)?;
        let positions: Vec<Tensor<T>> = out.positions.iter().map(|&v| (*g.value(v)).clone()).collect();
        let last = *out.positions.last().expect("at least one position");
        let cell = g.scale(last, T::lit(1.0 / self.encoder.config().downsample as f64))?;
        let recent = g.bilinear_sample_batched(fmaps, cell)?;
        Ok((
            TrackState {
                positions,
                query_feat: (*g.value(f1)).clone(),
                recent_feats: (*g.value(recent)).clone(),
            },
            out.deltas.clone(),
        ))
    }

    /// Chains windows of `T_w` frames with stride `T_w − 1` over
    /// `frames: [T, 3, H, W]`. The trailing window is padded by repeating
    /// the last frame.
    pub fn track_video<T: Real>(
        &self,
        params: &ParamStore<T>,
        frames: &Tensor<T>,
        queries: &[[f64; 2]],
    ) -> Result<TrackResult> {
        let s = frames.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::config(format!("frames must be [T,3,H,W], got {:?}", s)));
        }
        let t_total = s[0];
        if t_total < 2 {
            return Err(Error::config("track_video needs at least 2 frames"));
        }
        check_queries(queries, s[2], s[3])?;
        let tw = self.cfg.window_len;
        let n = queries.len();
        let frame_len = 3 * s[2] * s[3];
        let stride = self.encoder.config().downsample;
        let inv = T::lit(1.0 / stride as f64);
        let max_lag = self.cfg.max_lag();

        let mut tracks = vec![0f32; t_total * n * 2];
        let mut diagnostics = Vec::new();
        let mut history: Vec<Tensor<T>> = Vec::new();
        let mut f1: Option<Tensor<T>> = None;
        let mut start_points: Vec<[f64; 2]> = queries.to_vec();
        let mut start = 0usize;
        loop {
            let idx: Vec<usize> = (0..tw).map(|t| (start + t).min(t_total - 1)).collect();
            let mut data = Vec::with_capacity(tw * frame_len);
            for &fi in &idx {
                data.extend_from_slice(&frames.data()[fi * frame_len..(fi + 1) * frame_len]);
            }
            let window = Tensor::new(vec![tw, 3, s[2], s[3]], data)?;

            let g = Graph::new();
            let p = params.bind(&g, false);
            let fmaps = self.encoder.forward(&g, &p, g.constant(window))?;
            let qf = match &f1 {
                Some(f) => g.constant(f.clone()),
                None => {
                    let v = self.sample_query_feat(&g, fmaps, queries)?;
                    f1 = Some((*g.value(v)).clone());
                    v
                }
            };
            let out = self.run_window(&g, &p, fmaps, broadcast_points(&start_points, tw), qf, &history)?;
            let last = *out.positions.last().expect("positions");
            let final_pos = g.value(last);
            for t in 0..tw {
                let gt = start + t;
                if gt >= t_total {
                    break;
                }
                for i in 0..2 * n {
                    tracks[gt * n * 2 + i] = final_pos.data()[t * n * 2 + i].to_f32().unwrap();
                }
            }
            diagnostics.push(out.deltas.clone());
            if start + tw >= t_total {
                break;
            }
            // carry: features at final positions for frames before the next start
            let recent = g.bilinear_sample_batched(fmaps, g.scale(last, inv)?)?;
            let rv = g.value(recent);
            let d = rv.shape()[2];
            for t in 0..tw - 1 {
                history.push(Tensor::new(vec![n, d], rv.data()[t * n * d..(t + 1) * n * d].to_vec())?);
            }
            if history.len() > max_lag {
                history.drain(..history.len() - max_lag);
            }
            start_points = (0..n)
                .map(|i| {
                    let o = ((tw - 1) * n + i) * 2;
                    [
                        final_pos.data()[o].to_f64().unwrap(),
                        final_pos.data()[o + 1].to_f64().unwrap(),
                    ]
                })
                .collect();
            start += tw - 1;
        }
        Ok(TrackResult {
            tracks: Tensor::new(vec![t_total, n, 2], tracks)?,
            window_deltas: diagnostics,
            stride,
            config_hash: self.config_hash(),
        })
    }
}

const RESULT_MAGIC: &[u8; 4] = b"OTTR";
const RESULT_VERSION: u32 = 1;

/// Final trajectories of a video with per-window diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    /// `[T, N, 2]` pixels.
    pub tracks: Tensor<f32>,
    /// Per window, the mean |Δp| of each iteration.
    pub window_deltas: Vec<Vec<f64>>,
    pub stride: usize,
    pub config_hash: [u8; 32],
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::format("track result truncated"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

impl TrackResult {
    pub fn frames(&self) -> usize {
        self.tracks.shape()[0]
    }

    pub fn tracks_len(&self) -> usize {
        self.tracks.shape()[1]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RESULT_MAGIC);
        out.extend_from_slice(&RESULT_VERSION.to_le_bytes());
        for v in [self.frames(), self.tracks_len(), self.stride] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.config_hash);
        for v in self.tracks.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.window_deltas.len() as u32).to_le_bytes());
        for w in &self.window_deltas {
            out.extend_from_slice(&(w.len() as u32).to_le_bytes());
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self> {
        let b = &mut buf;
        if take(b, 4)? != RESULT_MAGIC {
            return Err(Error::format("not a track result file (bad magic)"));
        }
        let version = take_u32(b)?;
        if version != RESULT_VERSION {
            return Err(Error::format(format!("unsupported track result version {}", version)));
        }
        let t = take_u32(b)? as usize;
        let n = take_u32(b)? as usize;
        let stride = take_u32(b)? as usize;
        let config_hash: [u8; 32] = take(b, 32)?.try_into().expect("32 bytes");
        let payload = take(b, t * n * 2 * 4)?;
        let tracks: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let windows = take_u32(b)? as usize;
        let mut window_deltas = Vec::with_capacity(windows);
        for _ in 0..windows {
            let k = take_u32(b)? as usize;
            let raw = take(b, k * 8)?;
            window_deltas.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        if !b.is_empty() {
            return Err(Error::format("trailing bytes after track result"));
        }
        Ok(Self {
            tracks: Tensor::new(vec![t, n, 2], tracks)?,
            window_deltas,
            stride,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// `frame,track_id,x,y` rows.
    pub fn to_csv(&self) -> String {
        let (t_len, n) = (self.frames(), self.tracks_len());
        let mut s = String::from("frame,track_id,x,y\n");
        let d = self.tracks.data();
        for t in 0..t_len {
            for i in 0..n {
                let o = (t * n + i) * 2;
                s.push_str(&format!("{},{},{},{}\n", t, i, d[o], d[o + 1]));
            }
        }
        s
    }
}
