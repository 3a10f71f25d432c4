//! Synthetic clips: value-noise textured rigid shapes translating over a
//! textured static background.
//!
//! A [`SceneSpec`] fully describes a clip; [`generate_clip`] is a pure
//! function of it. [`SceneSpec::sample`] draws a spec from a seed and
//! [`SceneParams`]. Pixel centres sit at integer coordinates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{mask_lookup, MaskMap};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

/// One rigid object. Its centre at frame `t` is
/// `start + velocity·t + wobble_amp·sin(wobble_freq·t + wobble_phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    /// Rect: half width/height. Disk and triangle: radius in both slots.
    pub half_extent: [f64; 2],
    pub texture_seed: u64,
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub wobble_amp: [f64; 2],
    pub wobble_freq: f64,
    pub wobble_phase: f64,
    /// Larger is closer to the camera; unique within a scene.
    pub depth: u32,
}

impl ObjectSpec {
    pub fn centre(&self, t: usize) -> [f64; 2] {
        let tf = t as f64;
        let s = (self.wobble_freq * tf + self.wobble_phase).sin();
        [
            self.start[0] + self.velocity[0] * tf + self.wobble_amp[0] * s,
            self.start[1] + self.velocity[1] * tf + self.wobble_amp[1] * s,
        ]
    }

    /// Signed distance-like margin: positive inside, at least the
    /// Euclidean distance to the boundary for disk and rect, and a lower
    /// bound on it for the triangle.
    pub fn interior_margin(&self, u: f64, v: f64) -> f64 {
        match self.kind {
            ShapeKind::Disk => self.half_extent[0] - (u * u + v * v).sqrt(),
            ShapeKind::Rect => (self.half_extent[0] - u.abs()).min(self.half_extent[1] - v.abs()),
            ShapeKind::Triangle => {
                // equilateral triangle, circumradius r, apex pointing up (−y)
                let r = self.half_extent[0];
                let inradius = r * 0.5;
                let mut m = f64::INFINITY;
                for k in 0..3 {
                    let angle = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    let (nx, ny) = (angle.cos(), angle.sin());
                    m = m.min(inradius - (u * nx + v * ny));
                }
                m
            }
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        self.interior_margin(u, v) >= 0.0
    }

    fn bounding_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Rect => self.half_extent[0].hypot(self.half_extent[1]),
            _ => self.half_extent[0],
        }
    }
}

/// Complete description of one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tracks: usize,
    pub background_seed: u64,
    /// Share of tracks placed on the background.
    pub background_fraction: f64,
    pub objects: Vec<ObjectSpec>,
}

/// Distribution that [`SceneSpec::sample`] draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tracks: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Bound on |velocity| per axis, px/frame.
    pub max_speed: f64,
    pub max_wobble: f64,
    pub occluder_probability: f64,
    pub background_fraction: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            tracks: 16,
            objects_min: 2,
            objects_max: 4,
            radius_min: 7.0,
            radius_max: 14.0,
            max_speed: 2.0,
            max_wobble: 1.0,
            occluder_probability: 0.3,
            background_fraction: 0.25,
        }
    }
}

impl SceneParams {
    /// Nothing moves and nothing occludes.
    pub fn static_scene(mut self) -> Self {
        self.max_speed = 0.0;
        self.max_wobble = 0.0;
        self.occluder_probability = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.height < 8 || self.width < 8 || self.tracks == 0 {
            return Err(Error::config("scene needs >= 2 frames, >= 8x8 pixels and >= 1 track"));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::config("objects_min exceeds objects_max"));
        }
        if !(self.radius_min > 1.5 && self.radius_min <= self.radius_max) {
            return Err(Error::config("radius range must satisfy 1.5 < min <= max"));
        }
        if 2.0 * self.radius_max >= self.height.min(self.width) as f64 {
            return Err(Error::config("objects larger than the frame"));
        }
        if !(0.0..=1.0).contains(&self.occluder_probability) || !(0.0..=1.0).contains(&self.background_fraction) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.max_speed < 0.0 || self.max_wobble < 0.0 {
            return Err(Error::config("speeds must be non-negative"));
        }
        Ok(())
    }
}

fn sample_kind(rng: &mut ChaCha8Rng) -> ShapeKind {
    match rng.gen_range(0..3) {
        0 => ShapeKind::Disk,
        1 => ShapeKind::Rect,
        _ => ShapeKind::Triangle,
    }
}

/// Centre path that stays inside `[lo, hi]` on one axis.
fn sample_axis(rng: &mut ChaCha8Rng, lo: f64, hi: f64, frames: usize, max_speed: f64, wobble: f64) -> (f64, f64, f64) {
    let amp = if wobble > 0.0 { rng.gen_range(0.0..=wobble) } else { 0.0 };
    let (lo, hi) = (lo + amp, hi - amp);
    let span = (frames - 1) as f64;
    let mut v = if max_speed > 0.0 { rng.gen_range(-max_speed..=max_speed) } else { 0.0 };
    if (v * span).abs() > hi - lo {
        v = (hi - lo) / span * v.signum();
    }
    let (s_lo, s_hi) = if v >= 0.0 { (lo, hi - v * span) } else { (lo - v * span, hi) };
    let start = if s_hi > s_lo { rng.gen_range(s_lo..=s_hi) } else { s_lo };
    (start, v, amp)
}

impl SceneSpec {
    pub fn sample(seed: u64, p: &SceneParams) -> Result<Self> {
        p.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_obj = rng.gen_range(p.objects_min..=p.objects_max);
        let occluder = rng.gen_bool(p.occluder_probability);
        let total = n_obj + occluder as usize;
        // random total depth order, occluder on top
        let mut depths: Vec<u32> = (0..n_obj as u32).collect();
        for i in (1..depths.len()).rev() {
            let j = rng.gen_range(0..=i);
            depths.swap(i, j);
        }
        let mut objects = Vec::with_capacity(total);
        for k in 0..total {
            let is_occluder = k == n_obj;
            let kind = if is_occluder { ShapeKind::Rect } else { sample_kind(&mut rng) };
            let r = rng.gen_range(p.radius_min..=p.radius_max);
            let half_extent = match kind {
                ShapeKind::Rect => {
                    let aspect = rng.gen_range(0.5..=1.0);
                    if is_occluder {
                        [r * 0.5, r]
                    } else {
                        [r * aspect, r]
                    }
                }
                _ => [r, r],
            };
            let speed = if is_occluder { 2.0 * p.max_speed } else { p.max_speed };
            let freq = rng.gen_range(0.3..1.2);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (sx, vx, ax) = sample_axis(&mut rng, 0.0, (p.width - 1) as f64, p.frames, speed, p.max_wobble);
            let (sy, vy, ay) = sample_axis(&mut rng, 0.0, (p.height - 1) as f64, p.frames, speed, p.max_wobble);
            objects.push(ObjectSpec {
                kind,
                half_extent,
                texture_seed: rng.gen(),
                start: [sx, sy],
                velocity: [vx, vy],
                wobble_amp: [ax, ay],
                wobble_freq: freq,
                wobble_phase: phase,
                depth: if is_occluder { n_obj as u32 } else { depths[k] },
            });
        }
        Ok(Self {
            seed,
            frames: p.frames,
            height: p.height,
            width: p.width,
            tracks: p.tracks,
            background_seed: rng.gen(),
            background_fraction: p.background_fraction,
            objects,
        })
    }
}

/// A training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `[T, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `[T, N, 2]` pixels.
    pub tracks: Tensor<f32>,
    /// `[T, N]` row-major.
    pub visible: Vec<bool>,
    pub masks: MaskMap,
    /// Instance id of each track (0 = background).
    pub instance_of_track: Vec<u32>,
}

impl Clip {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[2], s[3], self.tracks.shape()[1])
    }

    pub fn point(&self, t: usize, i: usize) -> [f64; 2] {
        let n = self.tracks.shape()[1];
        let d = self.tracks.data();
        [d[(t * n + i) * 2] as f64, d[(t * n + i) * 2 + 1] as f64]
    }

    /// Query positions (frame 0).
    pub fn queries(&self) -> Vec<[f64; 2]> {
        (0..self.tracks.shape()[1]).map(|i| self.point(0, i)).collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, c: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1000_0000_01b3) ^ splitmix(iy as u64 ^ (c << 56))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]` with lattice spacing `cell`.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64, c: u64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - ix, fy - iy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (ix as i64, iy as i64);
    let a = lattice(seed, ix, iy, c);
    let b = lattice(seed, ix + 1, iy, c);
    let d = lattice(seed, ix, iy + 1, c);
    let e = lattice(seed, ix + 1, iy + 1, c);
    let top = a + (b - a) * sx;
    let bot = d + (e - d) * sx;
    top + (bot - top) * sy
}

/// Two-octave texture with a per-seed base colour.
fn texture(seed: u64, x: f64, y: f64, c: u64) -> f64 {
    let base = lattice(seed, 1 << 40, 7, c);
    let v = 0.35 * base + 0.45 * value_noise(seed, x, y, 3.0, c) + 0.2 * value_noise(seed ^ 0x55, x, y, 7.0, c);
    v.clamp(0.0, 1.0)
}

fn in_frame(p: [f64; 2], h: usize, w: usize) -> bool {
    inside(p.map(f64::round), h, w)
}

/// Continuous test used for queries, which must be valid sample positions.
fn inside(p: [f64; 2], h: usize, w: usize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64
}

/// Rasterizes `spec` back to front. Errors if an object cannot fit in the
/// frame or no visible query point can be found.
pub fn generate_clip(spec: &SceneSpec) -> Result<Clip> {
    let (t_len, h, w, n) = (spec.frames, spec.height, spec.width, spec.tracks);
    if t_len == 0 || h == 0 || w == 0 {
        return Err(Error::config("empty clip geometry"));
    }
    for o in &spec.objects {
        if 2.0 * o.bounding_radius() >= h.min(w) as f64 {
            return Err(Error::config("object larger than the frame"));
        }
    }
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by_key(|&k| spec.objects[k].depth);
    let mut depths: Vec<u32> = spec.objects.iter().map(|o| o.depth).collect();
    depths.sort_unstable();
    if depths.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::config("object depths must be unique"));
    }

    let hw = h * w;
    let mut frames = vec![0f32; t_len * 3 * hw];
    let mut masks = vec![0u16; t_len * hw];
    let mut background = vec![0f32; 3 * hw];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                background[c * hw + y * w + x] = texture(spec.background_seed, x as f64, y as f64, c as u64) as f32;
            }
        }
    }
    for t in 0..t_len {
        let f = &mut frames[t * 3 * hw..(t + 1) * 3 * hw];
        f.copy_from_slice(&background);
        let m = &mut masks[t * hw..(t + 1) * hw];
        for &k in &order {
            let o = &spec.objects[k];
            let cen = o.centre(t);
            let r = o.bounding_radius().ceil() + 1.0;
            let y0 = (cen[1] - r).floor().max(0.0) as usize;
            let y1 = ((cen[1] + r).ceil().max(0.0) as usize).min(h - 1);
            let x0 = (cen[0] - r).floor().max(0.0) as usize;
            let x1 = ((cen[0] + r).ceil().max(0.0) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (u, v) = (x as f64 - cen[0], y as f64 - cen[1]);
                    if !o.contains(u, v) {
                        continue;
                    }
                    m[y * w + x] = (k + 1) as u16;
                    for c in 0..3 {
                        f[c * hw + y * w + x] = texture(o.texture_seed, u, v, c as u64) as f32;
                    }
                }
            }
        }
    }
    let masks = MaskMap::new(t_len, h, w, masks)?;

    // query points on frame 0: objects first, then background
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0x7472_6163_6b73));
    let n_bg = if spec.objects.is_empty() {
        n
    } else {
        ((n as f64) * spec.background_fraction).round() as usize
    };
    let margin = 1.5;
    let mut locals: Vec<(u32, [f64; 2])> = Vec::with_capacity(n);
    for i in 0..n {
        let want_bg = i >= n - n_bg;
        let mut placed = None;
        for _ in 0..1000 {
            if want_bg {
                let p = [rng.gen_range(0.0..(w - 1) as f64), rng.gen_range(0.0..(h - 1) as f64)];
                if mask_lookup(masks.frame(0), p) == 0 {
                    placed = Some((0u32, p));
                    break;
                }
            } else {
                let k = rng.gen_range(0..spec.objects.len());
                let o = &spec.objects[k];
                let r = o.bounding_radius();
                let (u, v) = (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
                if o.interior_margin(u, v) < margin {
                    continue;
                }
                let c0 = o.centre(0);
                let p = [c0[0] + u, c0[1] + v];
                if inside(p, h, w) && mask_lookup(masks.frame(0), p) == (k + 1) as u16 {
                    placed = Some(((k + 1) as u32, [u, v]));
                    break;
                }
            }
        }
        let placed = match placed {
            Some(p) => p,
            None => {
                // fall back to any visible pixel centre
                let (x, y) = (0..hw)
                    .map(|j| (j % w, j / w))
                    .find(|&(x, y)| {
                        let id = masks.frame(0).data[y * w + x];
                        id == 0 || spec.objects[id as usize - 1].interior_margin(
                            x as f64 - spec.objects[id as usize - 1].centre(0)[0],
                            y as f64 - spec.objects[id as usize - 1].centre(0)[1],
                        ) >= margin
                    })
                    .ok_or_else(|| Error::config("no visible query point available"))?;
                let id = masks.frame(0).data[y * w + x] as u32;
                if id == 0 {
                    (0, [x as f64, y as f64])
                } else {
                    let c0 = spec.objects[id as usize - 1].centre(0);
                    (id, [x as f64 - c0[0], y as f64 - c0[1]])
                }
            }
        };
        locals.push(placed);
    }

    let mut tracks = vec![0f32; t_len * n * 2];
    let mut visible = vec![false; t_len * n];
    for t in 0..t_len {
        for (i, &(id, local)) in locals.iter().enumerate() {
            let p = if id == 0 {
                local
            } else {
                let c = spec.objects[id as usize - 1].centre(t);
                [c[0] + local[0], c[1] + local[1]]
            };
            tracks[(t * n + i) * 2] = p[0] as f32;
            tracks[(t * n + i) * 2 + 1] = p[1] as f32;
            let p32 = [p[0] as f32 as f64, p[1] as f32 as f64];
            visible[t * n + i] = in_frame(p32, h, w) && mask_lookup(masks.frame(t), p32) as u32 == id;
        }
    }
    Ok(Clip {
        frames: Tensor::new(vec![t_len, 3, h, w], frames)?,
        tracks: Tensor::new(vec![t_len, n, 2], tracks)?,
        visible,
        masks,
        instance_of_track: locals.iter().map(|l| l.0).collect(),
    })
}

/// One broken clip invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape(String),
    FrameValue { index: usize },
    QueryHidden { track: usize },
    OutOfFrame { frame: usize, track: usize },
    WrongInstance { frame: usize, track: usize, found: u16, expected: u32 },
}

/// Checks every clip invariant; an empty list means the clip is valid.
pub fn verify_clip(clip: &Clip) -> Vec<Violation> {
    let mut out = Vec::new();
    let fs = clip.frames.shape();
    if fs.len() != 4 || fs[1] != 3 {
        out.push(Violation::Shape(format!("frames {:?}", fs)));
        return out;
    }
    let (t_len, h, w) = (fs[0], fs[2], fs[3]);
    let ts = clip.tracks.shape();
    let n = ts.get(1).copied().unwrap_or(0);
    if ts.len() != 3 || ts[0] != t_len || ts[2] != 2 {
        out.push(Violation::Shape(format!("tracks {:?}", ts)));
        return out;
    }
    if clip.visible.len() != t_len * n || clip.instance_of_track.len() != n {
        out.push(Violation::Shape("visibility or instance table length".into()));
        return out;
    }
    if clip.masks.frames() != t_len || clip.masks.height() != h || clip.masks.width() != w {
        out.push(Violation::Shape("mask extents".into()));
        return out;
    }
    if let Some(index) = clip.frames.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        out.push(Violation::FrameValue { index });
    }
    for i in 0..n {
        if !clip.visible[i] {
            out.push(Violation::QueryHidden { track: i });
        }
        if !inside(clip.point(0, i), h, w) {
            out.push(Violation::OutOfFrame { frame: 0, track: i });
        }
    }
    for t in 0..t_len {
        for i in 0..n {
            if !clip.visible[t * n + i] {
                continue;
            }
            let p = clip.point(t, i);
            if !in_frame(p, h, w) {
                out.push(Violation::OutOfFrame { frame: t, track: i });
                continue;
            }
            let found = mask_lookup(clip.masks.frame(t), p);
            if found as u32 != clip.instance_of_track[i] {
                out.push(Violation::WrongInstance {
                    frame: t,
                    track: i,
                    found,
                    expected: clip.instance_of_track[i],
                });
            }
        }
    }
    out
}

const CLIP_MAGIC: &[u8; 4] = b"OTCL";
const CLIP_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Exact container size for the given header fields.
pub fn clip_file_size(t: usize, h: usize, w: usize, n: usize) -> usize {
    HEADER_LEN + t * 3 * h * w * 4 + t * n * 2 * 4 + (t * n).div_ceil(8) + t * h * w * 2 + n * 4
}

pub fn clip_to_bytes(clip: &Clip) -> Vec<u8> {
    let (t, h, w, n) = clip.dims();
    let mut out = Vec::with_capacity(clip_file_size(t, h, w, n));
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for v in [t, h, w, n] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in clip.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in clip.tracks.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut bits = vec![0u8; (t * n).div_ceil(8)];
    for (j, &v) in clip.visible.iter().enumerate() {
        if v {
            bits[j / 8] |= 1 << (j % 8);
        }
    }
    out.extend_from_slice(&bits);
    for v in clip.masks.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &clip.instance_of_track {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn clip_from_bytes(buf: &[u8]) -> Result<Clip> {
    if buf.len() < HEADER_LEN {
        return Err(Error::format("clip file truncated in header"));
    }
    if &buf[..4] != CLIP_MAGIC {
        return Err(Error::format("not a clip file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != CLIP_VERSION as usize {
        return Err(Error::format(format!("unsupported clip version {}", word(0))));
    }
    let (t, h, w, n) = (word(1), word(2), word(3), word(4));
    // header fields are untrusted: size them without overflow
    let (t2, h2, w2, n2) = (t as u128, h as u128, w as u128, n as u128);
    let expected =
        HEADER_LEN as u128 + t2 * 3 * h2 * w2 * 4 + t2 * n2 * 8 + (t2 * n2).div_ceil(8) + t2 * h2 * w2 * 2 + n2 * 4;
    if buf.len() as u128 != expected {
        return Err(Error::format(format!(
            "clip payload is {} bytes, header implies {}",
            buf.len(),
            expected
        )));
    }
    let mut at = HEADER_LEN;
    let mut next = |len: usize| {
        let s = &buf[at..at + len];
        at += len;
        s
    };
    let f32s = |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() };
    let frames = f32s(next(t * 3 * h * w * 4));
    let tracks = f32s(next(t * n * 2 * 4));
    let bits = next((t * n).div_ceil(8));
    let visible = (0..t * n).map(|j| bits[j / 8] & (1 << (j % 8)) != 0).collect();
    let masks: Vec<u16> = next(t * h * w * 2)
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let instance_of_track = next(n * 4)
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Clip {
        frames: Tensor::new(vec![t, 3, h, w], frames)?,
        tracks: Tensor::new(vec![t, n, 2], tracks)?,
        visible,
        masks: MaskMap::new(t, h, w, masks)?,
        instance_of_track,
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    write_atomic(path, &clip_to_bytes(clip))
}

pub fn read_clip(path: &Path) -> Result<Clip> {
    clip_from_bytes(&fs::read(path)?)
}

/// One `path seed` line of a corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub seed: u64,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Generates clips for seeds `first_seed..first_seed + count` into `dir`
/// and writes `dir/manifest.txt`. Returns the manifest path.
pub fn write_corpus(dir: &Path, first_seed: u64, count: usize, params: &SceneParams) -> Result<PathBuf> {
    params.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for k in 0..count {
        let seed = first_seed + k as u64;
        let clip = generate_clip(&SceneSpec::sample(seed, params)?)?;
        let name = format!("clip_{:05}.otc", k);
        write_clip(&dir.join(&name), &clip)?;
        manifest.push_str(&format!("{} {}\n", name, seed));
    }
    let path = dir.join(MANIFEST_NAME);
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Parses a manifest; relative clip paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (p, s) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| Error::format(format!("manifest line {}: expected `path seed`", lineno + 1)))?;
        let seed = s
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad seed `{}`", lineno + 1, s)))?;
        let p = PathBuf::from(p.trim());
        out.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            seed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_bounded() {
        for i in 0..500 {
            let v = texture(3, i as f64 * 0.37, i as f64 * 0.11, (i % 3) as u64);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn triangle_margin_is_positive_at_centre() {
        let o = ObjectSpec {
            kind: ShapeKind::Triangle,
            half_extent: [10.0, 10.0],
            texture_seed: 0,
            start: [0.0, 0.0],
            velocity: [0.0, 0.0],
            wobble_amp: [0.0, 0.0],
            wobble_freq: 0.0,
            wobble_phase: 0.0,
            depth: 0,
        };
        assert!((o.interior_margin(0.0, 0.0) - 5.0).abs() < 1e-12);
        assert!(o.contains(0.0, -9.9));
        assert!(!o.contains(0.0, 9.9));
    }
}
