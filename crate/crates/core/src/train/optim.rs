use std::f64::consts::PI;

use indexmap::IndexMap;

use super::TrainConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

/// One-cycle schedule: cosine ramp from `lr_max / initial_div` to `lr_max`
/// over the warmup, then cosine decay to `lr_max / final_div` at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let max = cfg.lr_max;
    let start = max / cfg.initial_div;
    let end = max / cfg.final_div;
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = cfg.warmup_frac * total;
    if step < warm {
        max - (max - start) * 0.5 * (1.0 + (PI * step / warm).cos())
    } else if total > warm {
        let progress = (step - warm) / (total - warm);
        end + (max - end) * 0.5 * (1.0 + (PI * progress).cos())
    } else {
        max
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl Moments {
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let z = |_: ()| -> IndexMap<String, Vec<f32>> {
            params
                .iter()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
                .collect()
        };
        Self {
            step: 0,
            m: z(()),
            v: z(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Bias-corrected adaptive update with decoupled decay. Refuses the
    /// whole step (nothing is modified) if any gradient is non-finite.
    pub fn step(
        &self,
        params: &mut ParamStore<f32>,
        grads: &IndexMap<String, Tensor<f32>>,
        moments: &mut Moments,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in `{}` at element {}; step refused",
                    name, i
                )));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter `{}`", name)))?;
            if p.shape() != g.shape() {
                return Err(Error::config(format!("gradient shape mismatch for `{}`", name)));
            }
        }
        moments.step += 1;
        let t = moments.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (name, g) in grads {
            let m = moments.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = moments.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let p = params.get_mut(name).expect("checked above");
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                let m_new = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let v_new = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let update = (m_new / bc1) / ((v_new / bc2).sqrt() + self.eps);
                *pv = (*pv as f64 * decay - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
