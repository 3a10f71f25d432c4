use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{write_config, Checkpoint};
use super::data::ClipSource;
use super::optim::{clip_grad_norm, lr_at, AdamW, Moments};
use super::Config;
use crate::losses::{LossWeights, Supervision, TrainingLoss};
use crate::synth::Clip;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError};
use crate::{Error, Result};

pub const LOG_NAME: &str = "loss.log";
pub const CHECKPOINT_NAME: &str = "last.ckpt";

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub l_dist: f64,
    pub l_obj: f64,
    pub total: f64,
    pub lr: f64,
    pub frac_out_of_object: f64,
    pub grad_norm: f64,
}

impl LogLine {
    pub fn to_line(&self) -> String {
        format!(
            "step={} l_dist={} l_obj={} total={} lr={} frac_out_of_object={} grad_norm={}",
            self.step, self.l_dist, self.l_obj, self.total, self.lr, self.frac_out_of_object, self.grad_norm
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut vals = std::collections::HashMap::new();
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad log field `{}`", field)))?;
            vals.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            vals.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("log line lacks `{}`", k)))
        };
        Ok(Self {
            step: num("step")? as usize,
            l_dist: num("l_dist")?,
            l_obj: num("l_obj")?,
            total: num("total")?,
            lr: num("lr")?,
            frac_out_of_object: num("frac_out_of_object")?,
            grad_norm: num("grad_norm")?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(LogLine::parse)
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from `out_dir/last.ckpt` if present.
    pub resume: bool,
    /// Resume even if the configuration hash differs.
    pub force: bool,
    /// Stop after this many completed steps (the schedule still spans
    /// `train.steps`).
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Lines written by this invocation.
    pub log: Vec<LogLine>,
}

/// Initial parameters for `cfg`, drawn from stream 0 of the seed.
pub fn init_params(cfg: &Config) -> Result<ParamStore<f32>> {
    let tracker = cfg.tracker()?;
    let mut store = ParamStore::new();
    tracker.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    Ok(store)
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// The first `frames` frames of a clip as supervision tensors.
struct WindowData {
    tracks: Tensor<f32>,
    visible: Vec<bool>,
    masks: crate::losses::MaskMap,
}

fn window_of(clip: &Clip, frames: usize) -> Result<WindowData> {
    let (t, _, _, n) = clip.dims();
    if t < frames {
        return Err(Error::format(format!("clip has {} frames, window needs {}", t, frames)));
    }
    Ok(WindowData {
        tracks: Tensor::new(vec![frames, n, 2], clip.tracks.data()[..frames * n * 2].to_vec())?,
        visible: clip.visible[..frames * n].to_vec(),
        masks: clip.masks.slice(0, frames),
    })
}

fn numeric(e: Error, step: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => {
            Error::Numeric(format!("non-finite value in `{}` at step {}", op, step))
        }
        other => other,
    }
}

/// Trains on `source`, appending to `out_dir/loss.log` and saving
/// `out_dir/last.ckpt` every `checkpoint_every` steps and at the end.
pub fn train(cfg: &Config, source: &dyn ClipSource, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::format("training corpus is empty"));
    }
    let tracker = cfg.tracker()?;
    let tc = &cfg.train;
    let hash = cfg.hash();
    fs::create_dir_all(&opts.out_dir)?;
    write_config(&opts.out_dir, &cfg.to_toml())?;
    let ckpt_path = opts.out_dir.join(CHECKPOINT_NAME);
    let log_path = opts.out_dir.join(LOG_NAME);

    let (mut params, mut moments, start) = if opts.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        ck.check_hash(&hash, opts.force)?;
        // drop log lines past the checkpoint
        let kept: Vec<LogLine> = if log_path.exists() {
            read_log(&log_path)?.into_iter().filter(|l| l.step <= ck.step).collect()
        } else {
            Vec::new()
        };
        let text: String = kept.iter().map(|l| l.to_line() + "\n").collect();
        fs::write(&log_path, text)?;
        (ck.params, ck.moments, ck.step)
    } else {
        fs::write(&log_path, "")?;
        let p = init_params(cfg)?;
        let m = Moments::zeros_like(&p);
        (p, m, 0)
    };

    let adam = AdamW::from_config(tc);
    let weights = LossWeights {
        gamma: tc.gamma,
        alpha: tc.alpha,
        use_obj_loss: tc.use_obj_loss,
        loss_on_occluded: tc.loss_on_occluded,
    };
    let tw = cfg.tracker.window_len;
    let stop = opts.stop_after.unwrap_or(tc.steps).min(tc.steps);
    let mut log_file = OpenOptions::new().append(true).open(&log_path)?;
    let mut written = Vec::new();
    let save = |params: &ParamStore<f32>, moments: &Moments, step: usize| -> Result<Checkpoint> {
        let ck = Checkpoint {
            step,
            config_hash: hash,
            seed: tc.seed,
            params: params.clone(),
            moments: moments.clone(),
        };
        ck.save(&ckpt_path)?;
        Ok(ck)
    };

    for step in start + 1..=stop {
        let mut rng = step_rng(tc.seed, step);
        let picks: Vec<usize> = (0..tc.batch_size).map(|_| rng.gen_range(0..source.len())).collect();
        let clips = picks.iter().map(|&i| source.clip(i)).collect::<Result<Vec<_>>>()?;
        let windows = clips.iter().map(|c| window_of(c, tw)).collect::<Result<Vec<_>>>()?;
        let (_, h, w, _) = clips[0].dims();
        let mut frames = Vec::with_capacity(tc.batch_size * tw * 3 * h * w);
        for c in &clips {
            if c.dims().1 != h || c.dims().2 != w {
                return Err(Error::format("clips in a batch differ in frame size"));
            }
            frames.extend_from_slice(&c.frames.data()[..tw * 3 * h * w]);
        }
        let queries: Vec<Vec<[f64; 2]>> = clips.iter().map(|c| c.queries()).collect();

        let (line, mut grads) = {
            let g = Graph::<f32>::new();
            let p = params.bind(&g, true);
            let fv = g.constant(Tensor::new(vec![tc.batch_size * tw, 3, h, w], frames)?);
            let outs = tracker.forward_windows(&g, &p, fv, &queries).map_err(|e| numeric(e, step))?;
            let mut total = None;
            let mut sums = [0.0f64; 4];
            for (out, win) in outs.iter().zip(&windows) {
                let sup = Supervision {
                    tracks: &win.tracks,
                    visible: &win.visible,
                    masks: &win.masks,
                };
                let l = TrainingLoss::build(&g, &out.positions[1..], sup, weights).map_err(|e| numeric(e, step))?;
                sums[0] += l.breakdown.l_dist;
                sums[1] += l.breakdown.l_obj;
                sums[2] += l.breakdown.total;
                sums[3] += l.breakdown.frac_out_of_object;
                total = Some(match total {
                    None => l.loss,
                    Some(t) => g.add(t, l.loss)?,
                });
            }
            let b = tc.batch_size as f64;
            let loss = g.scale(total.expect("batch_size >= 1"), 1.0 / tc.batch_size as f32)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", step)));
            }
            g.backward(loss).map_err(|e| numeric(e.into(), step))?;
            let grads = p.grads(&g);
            let line = LogLine {
                step,
                l_dist: sums[0] / b,
                l_obj: sums[1] / b,
                total: sums[2] / b,
                lr: lr_at(step - 1, tc.steps, tc),
                frac_out_of_object: sums[3] / b,
                grad_norm: 0.0,
            };
            (line, grads)
        };
        let mut line = line;
        line.grad_norm = clip_grad_norm(&mut grads, tc.grad_clip);
        adam.step(&mut params, &grads, &mut moments, line.lr)?;
        writeln!(log_file, "{}", line.to_line())?;
        log_file.flush()?;
        if step % 50 == 0 || step == stop {
            log::info!(
                "step {}/{} total {:.4} l_dist {:.4} l_obj {:.4} lr {:.2e}",
                step,
                tc.steps,
                line.total,
                line.l_dist,
                line.l_obj,
                line.lr
            );
        }
        written.push(line);
        if (tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) && step != stop {
            save(&params, &moments, step)?;
        }
    }
    let checkpoint = save(&params, &moments, stop.max(start))?;
    Ok(TrainOutcome {
        checkpoint,
        log: written,
    })
}
