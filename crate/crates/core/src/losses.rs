//! Training objective: iteration-weighted L1 distance loss plus the
//! instance-mask objectness term.
//!
//! Every function exists twice. The plain `f64` versions are the reference
//! semantics; [`TrainingLoss::build`] records the same quantity on a graph
//! with constant weights so gradients reach the predicted positions.

use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Per-frame instance-id grids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMap {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u16>,
}

/// One frame of a [`MaskMap`].
#[derive(Clone, Copy, Debug)]
pub struct MaskFrame<'a> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [u16],
}

impl MaskMap {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::format(format!(
                "mask payload has {} ids, expected {}x{}x{}",
                data.len(),
                frames,
                height,
                width
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::format("mask frames must be non-empty"));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0; frames * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> MaskFrame<'_> {
        let n = self.height * self.width;
        MaskFrame {
            height: self.height,
            width: self.width,
            data: &self.data[t * n..(t + 1) * n],
        }
    }

    /// Restricts to frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> MaskMap {
        let n = self.height * self.width;
        MaskMap {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }
}

/// Nearest-pixel id at `p = (x, y)`: round half away from zero, clamp.
pub fn mask_lookup(mask: MaskFrame<'_>, p: [f64; 2]) -> u16 {
    let clampi = |v: f64, n: usize| -> usize {
        let r = v.round();
        if r.is_nan() || r <= 0.0 {
            0
        } else if r >= (n - 1) as f64 {
            n - 1
        } else {
            r as usize
        }
    };
    let x = clampi(p[0], mask.width);
    let y = clampi(p[1], mask.height);
    mask.data[y * mask.width + x]
}

fn l1(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

/// Mean over visible frames of the gated L1 error of the final
/// iteration. Returns 0 when no frame is visible.
pub fn objectness_loss(pred: &[[f64; 2]], gt: &[[f64; 2]], masks: &MaskMap, visible: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut tv = 0usize;
    for t in 0..gt.len() {
        if !visible[t] {
            continue;
        }
        tv += 1;
        let frame = masks.frame(t);
        if mask_lookup(frame, gt[t]) != mask_lookup(frame, pred[t]) {
            sum += l1(gt[t], pred[t]);
        }
    }
    if tv == 0 {
        0.0
    } else {
        sum / tv as f64
    }
}

/// `Σ_k γ^{K−k} · mean_visible ‖gt − p^k‖₁` for `preds[k−1] = p^k`.
pub fn distance_loss(preds: &[Vec<[f64; 2]>], gt: &[[f64; 2]], gamma: f64, visible: &[bool]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::config("distance loss needs at least one iteration"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(format!("gamma must lie in (0, 1], got {}", gamma)));
    }
    let k_total = preds.len();
    let tv = visible.iter().filter(|v| **v).count();
    if tv == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (k, pk) in preds.iter().enumerate() {
        let mut sum = 0.0;
        for t in 0..gt.len() {
            if visible[t] {
                sum += l1(gt[t], pk[t]);
            }
        }
        total += gamma.powi((k_total - 1 - k) as i32) * (sum / tv as f64);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_dist: f64,
    pub l_obj: f64,
    pub total: f64,
    /// Share of visible points whose final prediction lands on a different
    /// instance than the ground truth.
    pub frac_out_of_object: f64,
    /// Tracks with no visible frame (their terms are 0).
    pub empty_tracks: usize,
}

/// Mean over tracks of `l_dist + α·l_obj` from per-track `(l_dist, l_obj)`.
pub fn total_loss(per_track: &[(f64, f64)], alpha: f64) -> LossBreakdown {
    let n = per_track.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    let mut total = 0.0;
    for &(d, o) in per_track {
        out.l_dist += d;
        out.l_obj += o;
        total += d + alpha * o;
    }
    out.l_dist /= n;
    out.l_obj /= n;
    out.total = total / n;
    out
}

/// Ground truth for one clip window, track-major accessors over `[T, N, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct Supervision<'a> {
    /// `[T, N, 2]` pixels.
    pub tracks: &'a Tensor<f32>,
    /// `[T, N]` row-major.
    pub visible: &'a [bool],
    pub masks: &'a MaskMap,
}

impl Supervision<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.tracks.shape()[0], self.tracks.shape()[1])
    }

    fn point(&self, t: usize, i: usize) -> [f64; 2] {
        let n = self.dims().1;
        let d = self.tracks.data();
        [d[(t * n + i) * 2] as f64, d[(t * n + i) * 2 + 1] as f64]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub use_obj_loss: bool,
    /// Count occluded frames in both terms.
    pub loss_on_occluded: bool,
}

fn track_column<T: Real>(values: &Tensor<T>, i: usize) -> Vec<[f64; 2]> {
    let (t_len, n) = (values.shape()[0], values.shape()[1]);
    (0..t_len)
        .map(|t| {
            let d = values.data();
            [d[(t * n + i) * 2].to_f64().unwrap(), d[(t * n + i) * 2 + 1].to_f64().unwrap()]
        })
        .collect()
}

/// The scalar loss node plus its reference breakdown.
pub struct TrainingLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

impl TrainingLoss {
    /// Records the window loss for `preds[k−1] = p^k` (each `[T, N, 2]`).
    pub fn build<T: Real>(g: &Graph<T>, preds: &[Var], sup: Supervision<'_>, w: LossWeights) -> Result<Self> {
        let (t_len, n) = sup.dims();
        if preds.is_empty() {
            return Err(Error::config("distance loss needs at least one iteration"));
        }
        if !(w.gamma > 0.0 && w.gamma <= 1.0) || w.alpha < 0.0 {
            return Err(Error::config(format!("invalid loss weights {:?}", w)));
        }
        let k_total = preds.len();
        let vis = |t: usize, i: usize| w.loss_on_occluded || sup.visible[t * n + i];
        let tv: Vec<usize> = (0..n).map(|i| (0..t_len).filter(|&t| vis(t, i)).count()).collect();
        let inv = |i: usize| if tv[i] == 0 { 0.0 } else { 1.0 / (tv[i] as f64 * n as f64) };

        let final_vals = g.value(preds[k_total - 1]);
        let final_cols: Vec<Vec<[f64; 2]>> = (0..n).map(|i| track_column(&final_vals, i)).collect();
        let frame_ok = |t: usize, i: usize| -> bool {
            let frame = sup.masks.frame(t);
            mask_lookup(frame, sup.point(t, i)) == mask_lookup(frame, final_cols[i][t])
        };
        let gate: Vec<bool> = (0..t_len * n).map(|j| !frame_ok(j / n, j % n)).collect();

        let gt = g.constant(sup.tracks.cast::<T>());
        let mut terms = Vec::with_capacity(k_total + 1);
        for (k, &pk) in preds.iter().enumerate() {
            if g.shape(pk) != sup.tracks.shape() {
                return Err(Error::config(format!(
                    "prediction shape {:?} does not match ground truth {:?}",
                    g.shape(pk),
                    sup.tracks.shape()
                )));
            }
            let gk = w.gamma.powi((k_total - 1 - k) as i32);
            let weights = Tensor::from_fn(vec![t_len, n, 2], |j| {
                let (t, i) = (j / (2 * n), (j / 2) % n);
                T::lit(if vis(t, i) { gk * inv(i) } else { 0.0 })
            });
            let diff = g.abs(g.sub(pk, gt)?)?;
            terms.push(g.sum(g.mul(diff, g.constant(weights))?)?);
        }
        if w.use_obj_loss {
            let weights = Tensor::from_fn(vec![t_len, n, 2], |j| {
                let (t, i) = (j / (2 * n), (j / 2) % n);
                T::lit(if vis(t, i) && gate[t * n + i] { w.alpha * inv(i) } else { 0.0 })
            });
            let diff = g.abs(g.sub(preds[k_total - 1], gt)?)?;
            terms.push(g.sum(g.mul(diff, g.constant(weights))?)?);
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t)?;
        }

        // reference breakdown from the same values
        let pred_vals: Vec<Tensor<T>> = preds.iter().map(|&p| (*g.value(p)).clone()).collect();
        let mut per_track = Vec::with_capacity(n);
        let (mut out_count, mut vis_count, mut empty) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let gt_i: Vec<[f64; 2]> = (0..t_len).map(|t| sup.point(t, i)).collect();
            let v_i: Vec<bool> = (0..t_len).map(|t| vis(t, i)).collect();
            let p_i: Vec<Vec<[f64; 2]>> = pred_vals.iter().map(|p| track_column(p, i)).collect();
            let ld = distance_loss(&p_i, &gt_i, w.gamma, &v_i)?;
            let lo = if w.use_obj_loss {
                objectness_loss(&p_i[k_total - 1], &gt_i, sup.masks, &v_i)
            } else {
                0.0
            };
            per_track.push((ld, lo));
            if tv[i] == 0 {
                empty += 1;
            }
            for t in 0..t_len {
                if v_i[t] {
                    vis_count += 1;
                    out_count += gate[t * n + i] as usize;
                }
            }
        }
        let alpha = if w.use_obj_loss { w.alpha } else { 0.0 };
        let mut breakdown = total_loss(&per_track, alpha);
        breakdown.frac_out_of_object = if vis_count == 0 { 0.0 } else { out_count as f64 / vis_count as f64 };
        breakdown.empty_tracks = empty;
        Ok(Self { loss, breakdown })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker() -> MaskMap {
        // 4x4, two instances in a 2x2 checkerboard of 2x2 blocks
        let data = (0..16)
            .map(|i| {
                let (y, x) = (i / 4, i % 4);
                if (y / 2 + x / 2) % 2 == 0 {
                    1
                } else {
                    2
                }
            })
            .collect();
        MaskMap::new(1, 4, 4, data).unwrap()
    }

    #[test]
    fn lookup_rounds_half_away_and_clamps() {
        let m = checker();
        assert_eq!(mask_lookup(m.frame(0), [-5.0, -5.0]), 1);
        assert_eq!(mask_lookup(m.frame(0), [1.5, 0.0]), 2);
        assert_eq!(mask_lookup(m.frame(0), [1.49, 0.0]), 1);
        assert_eq!(mask_lookup(m.frame(0), [9.0, 9.0]), 1);
    }

    #[test]
    fn empty_visibility_gives_zero() {
        let m = MaskMap::zeros(2, 4, 4);
        let p = vec![[0.0, 0.0]; 2];
        assert_eq!(objectness_loss(&p, &[[1.0, 1.0]; 2], &m, &[false, false]), 0.0);
    }
}
