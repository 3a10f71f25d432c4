use super::data::ClipSource;
use crate::metrics::{aggregate, evaluate_clip, EvalReport, Trajectories};
use crate::tensor::ParamStore;
use crate::tracker::Tracker;
use crate::Result;

/// Tracks every clip from its frame-0 queries and averages the per-clip
/// metrics in corpus order.
pub fn evaluate(tracker: &Tracker, params: &ParamStore<f32>, source: &dyn ClipSource, mte_all: bool) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let clip = source.clip(i)?;
        let result = tracker.track_video(params, &clip.frames, &clip.queries())?;
        let (_, h, w, _) = clip.dims();
        let pred = Trajectories::from_tensor(&result.tracks)?;
        let gt = Trajectories::from_tensor(&clip.tracks)?;
        reports.push(evaluate_clip(&pred, &gt, &clip.visible, (h, w), mte_all)?);
    }
    aggregate(&reports)
}

/// Scores the ground truth against itself (perfect tracker).
pub fn evaluate_oracle(source: &dyn ClipSource, mte_all: bool) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let clip = source.clip(i)?;
        let (_, h, w, _) = clip.dims();
        let gt = Trajectories::from_tensor(&clip.tracks)?;
        reports.push(evaluate_clip(&gt, &gt, &clip.visible, (h, w), mte_all)?);
    }
    aggregate(&reports)
}
