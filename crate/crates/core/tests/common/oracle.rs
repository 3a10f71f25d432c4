//! Naive metric references and random fixtures.

use objtrack::metrics::{Trajectories, VisMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn traj(frames: usize, tracks: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Trajectories {
    let pts = (0..frames).flat_map(|t| (0..tracks).map(move |i| (t, i))).map(|(t, i)| f(t, i)).collect();
    Trajectories::new(frames, tracks, pts).unwrap()
}

/// Ground truth on a lattice and a prediction offset by `err` along x
/// from frame 1 on.
pub fn offset_pair(frames: usize, tracks: usize, err: f64) -> (Trajectories, Trajectories) {
    let gt = traj(frames, tracks, |t, i| [10.0 * i as f64 + t as f64, 5.0 * t as f64]);
    let pred = traj(frames, tracks, |t, i| {
        let p = gt.at(t, i);
        [p[0] + if t == 0 { 0.0 } else { err }, p[1]]
    });
    (pred, gt)
}

// Naive references: explicit loops in track-major order.

pub fn naive_err(p: &Trajectories, g: &Trajectories, t: usize, i: usize) -> f64 {
    let (a, b) = (p.at(t, i), g.at(t, i));
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}

pub fn naive_delta(p: &Trajectories, g: &Trajectories, vis: &[bool], mode: VisMode) -> Option<f64> {
    let mut acc = 0.0;
    let mut any = false;
    for th in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let (mut hit, mut tot) = (0, 0);
        for i in 0..g.tracks {
            for t in 1..g.frames {
                let v = vis[t * g.tracks + i];
                let take = match mode {
                    VisMode::All => true,
                    VisMode::Visible => v,
                    VisMode::Occluded => !v,
                };
                if take {
                    tot += 1;
                    if naive_err(p, g, t, i) < th {
                        hit += 1;
                    }
                }
            }
        }
        if tot > 0 {
            any = true;
            acc += hit as f64 / tot as f64;
        }
    }
    any.then(|| acc / 5.0 * 100.0)
}

pub fn naive_survival(p: &Trajectories, g: &Trajectories) -> f64 {
    let mut sum = 0.0;
    for i in 0..g.tracks {
        let mut len = 0;
        for t in 0..g.frames {
            if naive_err(p, g, t, i) > 50.0 {
                break;
            }
            len += 1;
        }
        sum += len as f64 / g.frames as f64;
    }
    sum / g.tracks as f64 * 100.0
}

pub fn naive_mte(p: &Trajectories, g: &Trajectories, vis: &[bool], all: bool) -> Option<f64> {
    let mut e = Vec::new();
    for i in (0..g.tracks).rev() {
        for t in 1..g.frames {
            if all || vis[t * g.tracks + i] {
                e.push(naive_err(p, g, t, i));
            }
        }
    }
    if e.is_empty() {
        return None;
    }
    // selection by counting instead of sorting
    let rank = |k: usize| -> f64 {
        *e.iter()
            .find(|&&x| {
                let below = e.iter().filter(|&&y| y < x).count();
                let equal = e.iter().filter(|&&y| y == x).count();
                below <= k && k < below + equal
            })
            .unwrap()
    };
    let n = e.len();
    Some(if n % 2 == 1 { rank(n / 2) } else { 0.5 * (rank(n / 2 - 1) + rank(n / 2)) })
}

pub struct Case {
    pub pred: Trajectories,
    pub gt: Trajectories,
    pub vis: Vec<bool>,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let (t, n) = (rng.gen_range(1..12), rng.gen_range(1..6));
    let scale = [0.5, 4.0, 30.0, 80.0][rng.gen_range(0..4)];
    let gt = traj(t, n, |_, _| [0.0; 2]);
    let gt = Trajectories {
        points: gt.points.iter().map(|_| [rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0)]).collect(),
        ..gt
    };
    let pred = Trajectories {
        points: gt
            .points
            .iter()
            .map(|p| [p[0] + rng.gen_range(-scale..scale), p[1] + rng.gen_range(-scale..scale)])
            .collect(),
        ..gt.clone()
    };
    let pv = rng.gen_range(0.0..=1.0);
    let vis = (0..t * n).map(|_| rng.gen_bool(pv)).collect();
    Case { pred, gt, vis }
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        _ => false,
    }
}

