use objtrack::encoder::{contextual_attention, AttentionLayerVars, Encoder, EncoderConfig};
use objtrack::tensor::gradcheck::{grad_check_with, GradCheckOptions};
use objtrack::tensor::BoundParams;
use objtrack::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Explicit per-patch attention: materialize Q, the 9-patch neighbourhood
/// V (zeros where missing), the softmax matrix, and the output.
#[allow(clippy::too_many_arguments)]
fn dense_attention_oracle(
    x: &Tensor<f64>,
    m: usize,
    qw: &Tensor<f64>,
    qb: &Tensor<f64>,
    kw: &Tensor<f64>,
    kb: &Tensor<f64>,
    ow: &Tensor<f64>,
    ob: &Tensor<f64>,
) -> Tensor<f64> {
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ph, pw) = (h / m, w / m);
    let token = |y: isize, xx: isize| -> Vec<f64> {
        if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
            vec![0.0; d]
        } else {
            (0..d).map(|c| x.at(&[c, y as usize, xx as usize])).collect()
        }
    };
    let project = |v: &[f64], wm: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        (0..d)
            .map(|j| b.data()[j] + (0..d).map(|i| v[i] * wm.at(&[i, j])).sum::<f64>())
            .collect()
    };
    let mut out = x.clone();
    for py in 0..ph {
        for px in 0..pw {
            let mut vs = Vec::new();
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (qy, qx) = (py as isize + dy, px as isize + dx);
                    let inside = qy >= 0 && qx >= 0 && (qy as usize) < ph && (qx as usize) < pw;
                    for iy in 0..m {
                        for ix in 0..m {
                            let t = if inside {
                                token(qy * m as isize + iy as isize, qx * m as isize + ix as isize)
                            } else {
                                vec![0.0; d]
                            };
                            vs.push(project(&t, kw, kb));
                        }
                    }
                }
            }
            for iy in 0..m {
                for ix in 0..m {
                    let (y, xx) = (py * m + iy, px * m + ix);
                    let q = project(&token(y as isize, xx as isize), qw, qb);
                    let logits: Vec<f64> = vs
                        .iter()
                        .map(|v| q.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let att: Vec<f64> = (0..d)
                        .map(|c| vs.iter().zip(&e).map(|(v, w)| v[c] * w / z).sum())
                        .collect();
                    let hout = project(&att, ow, ob);
                    for c in 0..d {
                        out.data_mut()[(c * h + y) * w + xx] = hout[c];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let d = 4;
    let x = rand_tensor(&mut rng, &[d, 4, 4]);
    let p: Vec<Tensor<f64>> = [[d, d], [d, 1], [d, d], [d, 1], [d, d], [d, 1]]
        .iter()
        .map(|s| {
            let shape: Vec<usize> = if s[1] == 1 { vec![s[0]] } else { s.to_vec() };
            rand_tensor(&mut rng, &shape)
        })
        .collect();
    let oracle = dense_attention_oracle(&x, 2, &p[0], &p[1], &p[2], &p[3], &p[4], &p[5]);
    let g = Graph::new();
    let layer = AttentionLayerVars {
        q_w: g.constant(p[0].clone()),
        q_b: g.constant(p[1].clone()),
        kv_w: g.constant(p[2].clone()),
        kv_b: g.constant(p[3].clone()),
        out_w: g.constant(p[4].clone()),
        out_b: g.constant(p[5].clone()),
    };
    let y = contextual_attention(&g, g.constant(x), &[layer], 2, 1, false).unwrap();
    let y = g.value(y);
    let err = y.data().iter().zip(oracle.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "max error {}", err);
}

#[test]
fn attention_rows_sum_to_one() {
    // With value projection = identity on a one-hot channel of ones, the
    // attention output of that channel is the sum of the weights.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let mut x = rand_tensor(&mut rng, &[d, 6, 6]);
    for i in 0..36 {
        x.data_mut()[3 * 36 + i] = 1.0;
    }
    let mut qw = rand_tensor(&mut rng, &[d, d]);
    for r in 0..d {
        qw.data_mut()[r * d + 3] = 0.0;
    }
    let g = Graph::new();
    let eye = Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let z = g.constant(Tensor::zeros(vec![d]));
    let layer = AttentionLayerVars {
        q_w: g.constant(qw),
        q_b: z,
        kv_w: g.constant(eye.clone()),
        kv_b: z,
        out_w: g.constant(eye),
        out_b: z,
    };
    let y = contextual_attention(&g, g.constant(x), &[layer], 2, 1, false).unwrap();
    let y = g.value(y);
    // centre patches see all 9 neighbours of ones
    for yy in 2..4 {
        for xx in 2..4 {
            assert!((y.at(&[3, yy, xx]) - 1.0).abs() < 1e-6);
        }
    }
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        stem_channels: 3,
        stem_kernel: 3,
        layer_channels: vec![3, 4, 4, 4],
        blocks_per_layer: 1,
        fuse_channels: vec![6, 4],
        out_dim: 4,
        downsample: 4,
        attn_layers: 1,
        attn_heads: 2,
        patch_size: 2,
        ..EncoderConfig::desk()
    }
}

fn randomize_out_proj(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.contains(".out.")).map(String::from).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let enc = Encoder::new(cfg).unwrap();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        enc.init_params(&mut store, &mut rng).unwrap();
        randomize_out_proj(&mut store, &mut rng);
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let frames = Tensor::from_fn(vec![2, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
        let weights = rand_tensor(&mut rng, &[2, 4, 4, 4]);
        inputs.push(frames);
        let n_params = names.len();
        let opts = GradCheckOptions {
            max_per_input: Some(4),
            seed,
            ..Default::default()
        };
        let report = grad_check_with(
            |g, vars| {
                let bound = BoundParams::from_vars(names.iter().cloned().zip(vars[..n_params].iter().copied()));
                let y = enc.forward(g, &bound, vars[n_params]).map_err(to_tensor_err)?;
                let w = g.constant(weights.clone());
                let p = g.mul(y, w)?;
                g.sum(p)
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(report.passed, "seed {}: {:?}", seed, report.worst);
        assert!(report.skipped * 10 <= report.checked, "seed {}: {} of {} skipped", seed, report.skipped, report.checked);
    }
}

fn to_tensor_err(e: objtrack::Error) -> objtrack::TensorError {
    match e {
        objtrack::Error::Tensor(t) => t,
        other => objtrack::TensorError::Invalid {
            op: "encoder",
            detail: other.to_string(),
        },
    }
}

#[test]
fn identical_frames_give_identical_features() {
    let enc = Encoder::new(EncoderConfig::desk()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f32>::new();
    enc.init_params(&mut store, &mut rng).unwrap();
    let frame = Tensor::from_fn(vec![3, 32, 32], |_| rng.gen_range(0.0f32..1.0));
    let a = enc.encode_frame(&store, &frame, 0).unwrap();
    let b = enc.encode_frame(&store, &frame, 1).unwrap();
    assert!(a.data.data().iter().zip(b.data.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn blob_frame(size: usize, cx: usize, cy: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_fn(vec![3, size, size], |i| {
        let c = i / (size * size);
        let y = (i / size) % size;
        let x = i % size;
        if (cy..cy + 16).contains(&y) && (cx..cx + 16).contains(&x) {
            tex[(c * 16 + y - cy) * 16 + x - cx]
        } else {
            0.5
        }
    })
}

fn shift_error(enc: &Encoder, store: &ParamStore<f64>, shift: usize) -> f64 {
    let s = enc.config().downsample;
    let size = 256;
    let a = enc.encode_frame(store, &blob_frame(size, 120, 120, 1), 0).unwrap().data;
    let b = enc.encode_frame(store, &blob_frame(size, 120 + shift, 120 + shift, 1), 0).unwrap().data;
    let cells = shift / s;
    let (d, h) = (a.shape()[0], a.shape()[1]);
    let mut err: f64 = 0.0;
    for c in 0..d {
        for y in 16..h - 16 - cells {
            for x in 16..h - 16 - cells {
                err = err.max((a.at(&[c, y, x]) - b.at(&[c, y + cells, x + cells])).abs());
            }
        }
    }
    err
}

#[test]
fn cnn_features_shift_by_one_cell_per_stride() {
    let mut cfg = EncoderConfig::desk();
    cfg.use_attention = false;
    let enc = Encoder::new(cfg).unwrap();
    let mut store = ParamStore::<f64>::new();
    enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(shift_error(&enc, &store, 4) < 1e-4);
}

#[test]
fn attention_encoder_is_shift_consistent_at_init_and_per_patch() {
    let enc = Encoder::new(EncoderConfig::desk()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    enc.init_params(&mut store, &mut rng).unwrap();
    // zero output projections: attention is the identity
    assert!(shift_error(&enc, &store, 4) < 1e-4);
    // random attention: consistent for shifts that keep the patch grid
    randomize_out_proj(&mut store, &mut rng);
    assert!(shift_error(&enc, &store, 16) < 1e-4);
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let enc = Encoder::new(EncoderConfig::desk()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    enc.init_params(&mut store, &mut rng).unwrap();
    randomize_out_proj(&mut store, &mut rng);
    let g = Graph::new();
    let p = store.bind(&g, true);
    let frames = g.constant(Tensor::from_fn(vec![2, 3, 32, 32], |_| rng.gen_range(0.0..1.0)));
    let y = enc.forward(&g, &p, frames).unwrap();
    let w = g.constant(rand_tensor(&mut rng, &g.shape(y)));
    let loss = g.sum(g.mul(y, w).unwrap()).unwrap();
    g.backward(loss).unwrap();
    for (name, grad) in p.grads(&g) {
        assert!(grad.data().iter().any(|v| *v != 0.0), "dead parameter {}", name);
    }
}
