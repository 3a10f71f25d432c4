//! Per-frame feature extraction.
//!
//! A residual CNN (stem, four residual layers, two fusing convolutions)
//! produces a `d`-channel map at stride `s`; the contextual attention stack
//! then refines it in place.

pub mod attention;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{BoundParams, Graph, ParamStore, Real, Tensor, Var};
use crate::{Error, Result};

pub use attention::{contextual_attention, contextual_attention_batched, AttentionLayerVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub layer_channels: Vec<usize>,
    pub blocks_per_layer: usize,
    /// Channels of the two fusing convolutions; the last equals `out_dim`.
    pub fuse_channels: Vec<usize>,
    pub out_dim: usize,
    pub downsample: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub patch_size: usize,
    pub use_attention: bool,
    /// Wrap every attention layer in `x + layer(x)`.
    pub attn_residual: bool,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn full_scale() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            layer_channels: vec![64, 96, 128, 128],
            blocks_per_layer: 2,
            fuse_channels: vec![256, 128],
            out_dim: 128,
            downsample: 8,
            attn_layers: 6,
            attn_heads: 8,
            patch_size: 7,
            use_attention: true,
            attn_residual: true,
            norm_eps: 1e-5,
        }
    }

    pub fn desk() -> Self {
        Self {
            stem_channels: 8,
            stem_kernel: 7,
            layer_channels: vec![8, 12, 16, 16],
            blocks_per_layer: 2,
            fuse_channels: vec![32, 16],
            out_dim: 16,
            downsample: 4,
            attn_layers: 2,
            attn_heads: 2,
            patch_size: 4,
            use_attention: true,
            attn_residual: true,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("encoder: {}", m)));
        if self.attn_heads == 0 || self.out_dim % self.attn_heads != 0 {
            return fail(format!("out_dim {} not divisible by {} heads", self.out_dim, self.attn_heads));
        }
        if self.patch_size == 0 {
            return fail("patch_size must be >= 1".into());
        }
        if !self.downsample.is_power_of_two() {
            return fail(format!("downsample {} is not a power of two", self.downsample));
        }
        if self.layer_channels.is_empty() {
            return fail("need at least one residual layer".into());
        }
        let stages = self.downsample.trailing_zeros() as usize;
        if stages > self.layer_channels.len() {
            return fail(format!("downsample {} needs {} stride-2 stages", self.downsample, stages));
        }
        if self.fuse_channels.len() != 2 || self.fuse_channels[1] != self.out_dim {
            return fail(format!(
                "fuse_channels {:?} must be [hidden, out_dim={}]",
                self.fuse_channels, self.out_dim
            ));
        }
        if self.stem_kernel % 2 == 0 {
            return fail("stem_kernel must be odd".into());
        }
        if self.blocks_per_layer == 0 {
            return fail("blocks_per_layer must be >= 1".into());
        }
        Ok(())
    }

    /// Stride of the stem followed by each residual layer. Stride-2 stages
    /// go to the stem first, then to layers 2, 3, ... in order.
    pub fn stage_strides(&self) -> (usize, Vec<usize>) {
        let mut remaining = self.downsample.trailing_zeros() as usize;
        let stem = if remaining > 0 {
            remaining -= 1;
            2
        } else {
            1
        };
        let mut layers = vec![1; self.layer_channels.len()];
        for s in layers.iter_mut().skip(1) {
            if remaining == 0 {
                break;
            }
            *s = 2;
            remaining -= 1;
        }
        (stem, layers)
    }
}

/// Feature map of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub frame_index: usize,
    /// `[d, H/s, W/s]`
    pub data: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
}

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

fn insert_conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
) -> Result<()> {
    let fan_in = inp * k * k;
    store.insert(format!("{name}.w"), uniform(rng, vec![out, inp, k, k], fan_in))?;
    store.insert(format!("{name}.b"), uniform(rng, vec![out], fan_in))?;
    Ok(())
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn block_needs_projection(&self, layer: usize, block: usize, in_ch: usize, stride: usize) -> bool {
        block == 0 && (stride != 1 || in_ch != self.cfg.layer_channels[layer])
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        let (_, strides) = c.stage_strides();
        insert_conv(store, rng, "enc.stem", c.stem_channels, 3, c.stem_kernel)?;
        let mut in_ch = c.stem_channels;
        for (li, &out_ch) in c.layer_channels.iter().enumerate() {
            for bi in 0..c.blocks_per_layer {
                let name = format!("enc.l{li}.b{bi}");
                let stride = if bi == 0 { strides[li] } else { 1 };
                insert_conv(store, rng, &format!("{name}.conv1"), out_ch, in_ch, 3)?;
                insert_conv(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3)?;
                if self.block_needs_projection(li, bi, in_ch, stride) {
                    insert_conv(store, rng, &format!("{name}.proj"), out_ch, in_ch, 1)?;
                }
                in_ch = out_ch;
            }
        }
        let cat: usize = c.layer_channels.iter().sum();
        insert_conv(store, rng, "enc.fuse1", c.fuse_channels[0], cat, 3)?;
        insert_conv(store, rng, "enc.fuse2", c.fuse_channels[1], c.fuse_channels[0], 1)?;
        if c.use_attention {
            for l in 0..c.attn_layers {
                attention::init_attention_params(store, rng, &format!("enc.attn{l}"), c.out_dim)?;
            }
        }
        Ok(())
    }

    fn conv<T: Real>(&self, g: &Graph<T>, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }

    fn norm_relu<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let y = g.instance_norm(x, T::lit(self.cfg.norm_eps))?;
        Ok(g.relu(y)?)
    }

    /// Encodes a stack of frames `[N, 3, H, W]` with values in `[0, 1]`
    /// into `[N, d, H/s, W/s]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &BoundParams, frames: Var) -> Result<Var> {
        let c = &self.cfg;
        let s = g.shape(frames);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::config(format!("encoder expects [N,3,H,W], got {:?}", s)));
        }
        if s[2] % c.downsample != 0 || s[3] % c.downsample != 0 {
            return Err(Error::config(format!(
                "frame size {}x{} not divisible by stride {}",
                s[2], s[3], c.downsample
            )));
        }
        let eps = T::lit(c.norm_eps);
        let (stem_stride, strides) = c.stage_strides();
        // [0,1] -> [-1,1]
        let x = g.scale(frames, T::lit(2.0))?;
        let x = g.add(x, g.constant(Tensor::full(s.clone(), T::lit(-1.0))))?;
        let x = self.conv(g, p, "enc.stem", x, stem_stride, c.stem_kernel / 2)?;
        let mut x = self.norm_relu(g, x)?;
        let mut cum_stride = stem_stride;
        let mut in_ch = c.stem_channels;
        let mut layer_outputs = Vec::with_capacity(c.layer_channels.len());
        for (li, &out_ch) in c.layer_channels.iter().enumerate() {
            for bi in 0..c.blocks_per_layer {
                let name = format!("enc.l{li}.b{bi}");
                let stride = if bi == 0 { strides[li] } else { 1 };
                let y = self.conv(g, p, &format!("{name}.conv1"), x, stride, 1)?;
                let y = self.norm_relu(g, y)?;
                let y = self.conv(g, p, &format!("{name}.conv2"), y, 1, 1)?;
                let y = g.instance_norm(y, eps)?;
                let shortcut = if self.block_needs_projection(li, bi, in_ch, stride) {
                    let sc = self.conv(g, p, &format!("{name}.proj"), x, stride, 0)?;
                    g.instance_norm(sc, eps)?
                } else {
                    x
                };
                x = g.relu(g.add(shortcut, y)?)?;
                in_ch = out_ch;
            }
            cum_stride *= strides[li];
            let factor = c.downsample / cum_stride;
            layer_outputs.push(if factor > 1 { g.avg_pool2d(x, factor)? } else { x });
        }
        let cat = g.concat(&layer_outputs, 1)?;
        let f = self.conv(g, p, "enc.fuse1", cat, 1, 1)?;
        let f = self.norm_relu(g, f)?;
        let f = self.conv(g, p, "enc.fuse2", f, 1, 0)?;
        if !c.use_attention || c.attn_layers == 0 {
            return Ok(f);
        }
        let layers = (0..c.attn_layers)
            .map(|l| AttentionLayerVars::bind(p, &format!("enc.attn{l}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(contextual_attention_batched(
            g,
            f,
            &layers,
            c.patch_size,
            c.attn_heads,
            c.attn_residual,
        )?)
    }

    /// Encodes a single `[3, H, W]` frame without recording gradients.
    pub fn encode_frame<T: Real>(&self, params: &ParamStore<T>, frame: &Tensor<T>, frame_index: usize) -> Result<FeatureMap<T>> {
        let s = frame.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::config(format!("encode_frame expects [3,H,W], got {:?}", s)));
        }
        let g = Graph::new();
        let p = params.bind(&g, false);
        let x = g.constant(frame.clone().reshape(vec![1, s[0], s[1], s[2]])?);
        let y = self.forward(&g, &p, x)?;
        let ys = g.shape(y);
        let data = (*g.value(y)).clone().reshape(vec![ys[1], ys[2], ys[3]])?;
        Ok(FeatureMap {
            frame_index,
            data,
            stride: self.cfg.downsample,
        })
    }
}
