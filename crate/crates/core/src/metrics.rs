//! Evaluation metrics on trajectories normalized to 256×256.
//!
//! Conventions: frame 0 is the query frame and is excluded from δ and MTE
//! (its error is zero by construction) but counts in the Survival
//! denominator. Survival fails on errors strictly greater than 50.

use std::fmt::Write as _;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const NORMALIZED_SIZE: usize = 256;
pub const SURVIVAL_FAILURE: f64 = 50.0;

/// Points `[T, N]` in frame-major order, `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub frames: usize,
    pub tracks: usize,
    pub points: Vec<[f64; 2]>,
}

impl Trajectories {
    pub fn new(frames: usize, tracks: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != frames * tracks {
            return Err(Error::config(format!(
                "{} points for {} frames x {} tracks",
                points.len(),
                frames,
                tracks
            )));
        }
        Ok(Self { frames, tracks, points })
    }

    /// From a `[T, N, 2]` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::config(format!("expected [T,N,2] tracks, got {:?}", s)));
        }
        let points = t.data().chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect();
        Self::new(s[0], s[1], points)
    }

    pub fn at(&self, t: usize, i: usize) -> [f64; 2] {
        self.points[t * self.tracks + i]
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if self.frames != other.frames || self.tracks != other.tracks {
            return Err(Error::config(format!(
                "trajectory shapes differ: {}x{} vs {}x{}",
                self.frames, self.tracks, other.frames, other.tracks
            )));
        }
        Ok(())
    }
}

/// Rescales `x` by `to.1 / from.1` and `y` by `to.0 / from.0`, with
/// resolutions given as `(H, W)`.
pub fn normalize_tracks(tracks: &Trajectories, from: (usize, usize), to: (usize, usize)) -> Result<Trajectories> {
    if from.0 == 0 || from.1 == 0 || to.0 == 0 || to.1 == 0 {
        return Err(Error::config("resolutions must be positive"));
    }
    let (sx, sy) = (to.1 as f64 / from.1 as f64, to.0 as f64 / from.0 as f64);
    Ok(Trajectories {
        frames: tracks.frames,
        tracks: tracks.tracks,
        points: tracks.points.iter().map(|p| [p[0] * sx, p[1] * sy]).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisMode {
    All,
    Visible,
    Occluded,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn selected(mode: VisMode, visible: bool) -> bool {
    match mode {
        VisMode::All => true,
        VisMode::Visible => visible,
        VisMode::Occluded => !visible,
    }
}

/// Errors of the evaluated points (frames ≥ 1) under `mode`.
fn evaluated_errors(pred: &Trajectories, gt: &Trajectories, visible: &[bool], mode: VisMode) -> Vec<f64> {
    let n = gt.tracks;
    (n..gt.frames * n)
        .filter(|&j| selected(mode, visible[j]))
        .map(|j| dist(pred.points[j], gt.points[j]))
        .collect()
}

fn check(pred: &Trajectories, gt: &Trajectories, visible: &[bool]) -> Result<()> {
    pred.same_layout(gt)?;
    if visible.len() != gt.points.len() {
        return Err(Error::config("visibility length does not match trajectories"));
    }
    Ok(())
}

/// Percentage of points within each threshold, averaged over thresholds.
/// `None` when no point is evaluated.
pub fn delta_avg(pred: &Trajectories, gt: &Trajectories, visible: &[bool], mode: VisMode) -> Result<Option<f64>> {
    check(pred, gt, visible)?;
    let errs = evaluated_errors(pred, gt, visible, mode);
    if errs.is_empty() {
        return Ok(None);
    }
    let mut within = [0usize; THRESHOLDS.len()];
    for e in &errs {
        for (k, th) in THRESHOLDS.iter().enumerate() {
            within[k] += (*e < *th) as usize;
        }
    }
    let frac: f64 = within.iter().map(|&c| c as f64 / errs.len() as f64).sum::<f64>() / THRESHOLDS.len() as f64;
    Ok(Some(100.0 * frac))
}

/// Frames tracked before the first error above the failure distance.
fn survived_frames(pred: &Trajectories, gt: &Trajectories, i: usize) -> usize {
    (0..gt.frames)
        .find(|&t| dist(pred.at(t, i), gt.at(t, i)) > SURVIVAL_FAILURE)
        .unwrap_or(gt.frames)
}

/// Mean over tracks of the surviving share of the video, in percent.
pub fn survival(pred: &Trajectories, gt: &Trajectories) -> Result<f64> {
    pred.same_layout(gt)?;
    if gt.frames == 0 || gt.tracks == 0 {
        return Err(Error::config("survival needs at least one frame and one track"));
    }
    let total: f64 = (0..gt.tracks)
        .map(|i| survived_frames(pred, gt, i) as f64 / gt.frames as f64)
        .sum();
    Ok(100.0 * total / gt.tracks as f64)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Median L2 error over evaluated points; visible only unless `all`.
pub fn mte(pred: &Trajectories, gt: &Trajectories, visible: &[bool], all: bool) -> Result<Option<f64>> {
    check(pred, gt, visible)?;
    let mode = if all { VisMode::All } else { VisMode::Visible };
    Ok(median(evaluated_errors(pred, gt, visible, mode)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackMetrics {
    pub delta_avg: Option<f64>,
    pub survival: f64,
    pub mte: Option<f64>,
}

/// Metrics of one clip, or the mean over clips.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub delta_avg: Option<f64>,
    pub delta_vis: Option<f64>,
    pub delta_occ: Option<f64>,
    pub survival: f64,
    pub mte: Option<f64>,
    pub clips: usize,
    pub tracks: usize,
    /// `(H, W)` the metrics were computed at.
    pub resolution: (usize, usize),
    pub mte_all_points: bool,
    pub per_track: Vec<TrackMetrics>,
}

fn single_track(t: &Trajectories, i: usize) -> Trajectories {
    Trajectories {
        frames: t.frames,
        tracks: 1,
        points: (0..t.frames).map(|f| t.at(f, i)).collect(),
    }
}

/// Normalizes pixel trajectories from `(H, W)` and scores them.
pub fn evaluate_clip(
    pred: &Trajectories,
    gt: &Trajectories,
    visible: &[bool],
    size: (usize, usize),
    mte_all: bool,
) -> Result<EvalReport> {
    check(pred, gt, visible)?;
    let norm = (NORMALIZED_SIZE, NORMALIZED_SIZE);
    let p = normalize_tracks(pred, size, norm)?;
    let g = normalize_tracks(gt, size, norm)?;
    let mut per_track = Vec::with_capacity(g.tracks);
    for i in 0..g.tracks {
        let (pi, gi) = (single_track(&p, i), single_track(&g, i));
        let vi: Vec<bool> = (0..g.frames).map(|t| visible[t * g.tracks + i]).collect();
        per_track.push(TrackMetrics {
            delta_avg: delta_avg(&pi, &gi, &vi, VisMode::All)?,
            survival: survival(&pi, &gi)?,
            mte: mte(&pi, &gi, &vi, mte_all)?,
        });
    }
    Ok(EvalReport {
        delta_avg: delta_avg(&p, &g, visible, VisMode::All)?,
        delta_vis: delta_avg(&p, &g, visible, VisMode::Visible)?,
        delta_occ: delta_avg(&p, &g, visible, VisMode::Occluded)?,
        survival: survival(&p, &g)?,
        mte: mte(&p, &g, visible, mte_all)?,
        clips: 1,
        tracks: g.tracks,
        resolution: norm,
        mte_all_points: mte_all,
        per_track,
    })
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for v in vals.flatten() {
        s += v;
        c += 1;
    }
    (c > 0).then(|| s / c as f64)
}

/// Mean of per-clip metrics in the given order; undefined clip values are
/// skipped. Per-track entries are concatenated.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::config("no clips to aggregate"))?;
    Ok(EvalReport {
        delta_avg: mean_defined(reports.iter().map(|r| r.delta_avg)),
        delta_vis: mean_defined(reports.iter().map(|r| r.delta_vis)),
        delta_occ: mean_defined(reports.iter().map(|r| r.delta_occ)),
        survival: reports.iter().map(|r| r.survival).sum::<f64>() / reports.len() as f64,
        mte: mean_defined(reports.iter().map(|r| r.mte)),
        clips: reports.iter().map(|r| r.clips).sum(),
        tracks: reports.iter().map(|r| r.tracks).sum(),
        resolution: first.resolution,
        mte_all_points: first.mte_all_points,
        per_track: reports.iter().flat_map(|r| r.per_track.iter().cloned()).collect(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{:.6}", x))
}

/// Shortest representation that parses back to the same value.
fn fmt_exact(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{}", x))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "undefined" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::format(format!("bad number `{}` in report", s)))
}

impl EvalReport {
    /// Readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Evaluation report");
        let _ = writeln!(s, "  clips:        {}", self.clips);
        let _ = writeln!(s, "  tracks:       {}", self.tracks);
        let _ = writeln!(s, "  resolution:   {}x{}", self.resolution.1, self.resolution.0);
        let _ = writeln!(s, "  delta_avg:    {} %", fmt_opt(self.delta_avg));
        let _ = writeln!(s, "  delta_vis:    {} %", fmt_opt(self.delta_vis));
        let _ = writeln!(s, "  delta_occ:    {} %", fmt_opt(self.delta_occ));
        let _ = writeln!(s, "  survival:     {:.6} %", self.survival);
        let _ = writeln!(
            s,
            "  mte:          {} px ({} points)",
            fmt_opt(self.mte),
            if self.mte_all_points { "all" } else { "visible" }
        );
        let _ = writeln!(s, "\n  track  delta_avg  survival  mte");
        for (i, t) in self.per_track.iter().enumerate() {
            let _ = writeln!(s, "  {:5}  {:>9}  {:8.3}  {}", i, fmt_opt(t.delta_avg), t.survival, fmt_opt(t.mte));
        }
        s
    }

    /// Lossless `key=value` lines; per-track rows are omitted.
    pub fn to_kv(&self) -> String {
        format!(
            "delta_avg={}\ndelta_vis={}\ndelta_occ={}\nsurvival={}\nmte={}\nclips={}\ntracks={}\nresolution={}x{}\nmte_points={}\n",
            fmt_exact(self.delta_avg),
            fmt_exact(self.delta_vis),
            fmt_exact(self.delta_occ),
            self.survival,
            fmt_exact(self.mte),
            self.clips,
            self.tracks,
            self.resolution.1,
            self.resolution.0,
            if self.mte_all_points { "all" } else { "visible" },
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("report line `{}` is not key=value", line)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::format(format!("report is missing `{}`", k)));
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("bad integer for `{}`", k)))
        };
        let res = get("resolution")?;
        let (w, h) = res
            .split_once('x')
            .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
            .ok_or_else(|| Error::format(format!("bad resolution `{}`", res)))?;
        Ok(Self {
            delta_avg: parse_opt(get("delta_avg")?)?,
            delta_vis: parse_opt(get("delta_vis")?)?,
            delta_occ: parse_opt(get("delta_occ")?)?,
            survival: parse_opt(get("survival")?)?.ok_or_else(|| Error::format("survival undefined"))?,
            mte: parse_opt(get("mte")?)?,
            clips: int("clips")?,
            tracks: int("tracks")?,
            resolution: (h, w),
            mte_all_points: get("mte_points")? == "all",
            per_track: Vec::new(),
        })
    }
}
