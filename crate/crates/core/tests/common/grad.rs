//! Finite-difference cases for every differentiable op.

use std::sync::Arc;

use objtrack::tensor::gradcheck::{grad_check, GradCheckReport};
use objtrack::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

/// Every differentiable op of the graph, grouped as the cases below exercise them.
pub const OP_GROUPS: &[&str] = &[
    "conv2d",
    "conv1d",
    "instance_norm",
    "relu_abs_scale",
    "add_sub_mul_mean",
    "matmul_linear",
    "bmm",
    "softmax",
    "concat_narrow_permute_reshape",
    "gather_rows_broadcast",
    "avg_pool",
    "bilinear_sample",
    "bilinear_batched",
];

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Random weights so every output element contributes to the scalar.
fn weighted_sum(g: &Graph<f64>, y: Var, seed: u64) -> objtrack::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, &g.shape(y));
    let p = g.mul(y, g.constant(w))?;
    g.sum(p)
}

fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> objtrack::tensor::Result<Var>) -> GradCheckReport {
    grad_check(f, &inputs, H, TOL).unwrap()
}

/// Reports for one op group on one random instance.
pub fn op_reports(group: &str, seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    match group {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let inputs = vec![rand_tensor(rng, &[2, 2, 5, 6]), rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[3])];
            vec![check(inputs, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                weighted_sum(g, y, seed)
            })]
        }
        "conv1d" => {
            let inputs = vec![rand_tensor(rng, &[2, 3, 7]), rand_tensor(rng, &[4, 3, 3]), rand_tensor(rng, &[4])];
            vec![check(inputs, |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), 1)?;
                weighted_sum(g, y, seed)
            })]
        }
        "instance_norm" => vec![check(vec![rand_tensor(rng, &[2, 3, 3, 4])], |g, v| {
            let y = g.instance_norm(v[0], 1e-5)?;
            weighted_sum(g, y, seed)
        })],
        "relu_abs_scale" => vec![check(vec![rand_tensor(rng, &[4, 5])], |g, v| {
            let a = g.relu(v[0])?;
            let b = g.abs(v[0])?;
            let c = g.scale(b, 0.3)?;
            let y = g.add(a, c)?;
            weighted_sum(g, y, seed)
        })],
        "add_sub_mul_mean" => {
            let inputs = vec![rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[3, 4])];
            vec![check(inputs, |g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.sub(v[0], v[1])?;
                let c = g.mul(a, b)?;
                let d = g.mul(c, v[0])?;
                g.mean(d)
            })]
        }
        "matmul_linear" => {
            let mut out = Vec::new();
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let a_shape = if ta { [4, 3] } else { [3, 4] };
                let b_shape = if tb { [5, 4] } else { [4, 5] };
                let inputs = vec![rand_tensor(rng, &a_shape), rand_tensor(rng, &b_shape)];
                out.push(check(inputs, |g, v| {
                    let y = g.matmul(v[0], v[1], ta, tb)?;
                    weighted_sum(g, y, seed)
                }));
            }
            let inputs = vec![rand_tensor(rng, &[6, 4]), rand_tensor(rng, &[4, 3]), rand_tensor(rng, &[3])];
            out.push(check(inputs, |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y, seed)
            }));
            out
        }
        "bmm" => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(ta, tb)| {
                let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
                let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
                let inputs = vec![rand_tensor(rng, &a_shape), rand_tensor(rng, &b_shape)];
                check(inputs, |g, v| {
                    let y = g.bmm(v[0], v[1], ta, tb)?;
                    weighted_sum(g, y, seed)
                })
            })
            .collect(),
        "softmax" => (0..3)
            .map(|axis| {
                check(vec![rand_tensor(rng, &[2, 3, 4])], |g, v| {
                    let y = g.softmax(v[0], axis)?;
                    weighted_sum(g, y, seed)
                })
            })
            .collect(),
        "concat_narrow_permute_reshape" => {
            let inputs = vec![rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[2, 2, 4])];
            vec![check(inputs, |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let p = g.permute(c, &[2, 0, 1])?;
                let r = g.reshape(p, vec![8, 5])?;
                let n = g.narrow(r, 1, 1, 3)?;
                weighted_sum(g, n, seed)
            })]
        }
        "gather_rows_broadcast" => {
            let idx: Vec<Option<usize>> = (0..7)
                .map(|_| if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..5)) })
                .collect();
            let idx = Arc::new(idx);
            let inputs = vec![rand_tensor(rng, &[5, 3]), rand_tensor(rng, &[3])];
            vec![check(inputs, |g, v| {
                let y = g.gather_rows(v[0], idx.clone())?;
                let y = g.add_broadcast(y, v[1], 1)?;
                weighted_sum(g, y, seed)
            })]
        }
        "avg_pool" => vec![check(vec![rand_tensor(rng, &[2, 2, 4, 6])], |g, v| {
            let y = g.avg_pool2d(v[0], 2)?;
            weighted_sum(g, y, seed)
        })],
        "bilinear_sample" => {
            let f = rand_tensor(rng, &[3, 5, 6]);
            // keep points away from integer cells and borders where the
            // interpolant has kinks
            let pts = Tensor::from_fn(vec![4, 2], |i| {
                let hi = if i % 2 == 0 { 5.0 } else { 4.0 };
                let v: f64 = rng.gen_range(0.1..hi - 0.1);
                let frac = v - v.floor();
                if !(0.05..=0.95).contains(&frac) {
                    v.floor() + 0.5
                } else {
                    v
                }
            });
            vec![check(vec![f, pts], |g, v| {
                let y = g.bilinear_sample(v[0], v[1])?;
                g.sum(y)
            })]
        }
        "bilinear_batched" => {
            let f = rand_tensor(rng, &[2, 2, 4, 4]);
            let pts = Tensor::from_fn(vec![2, 3, 2], |_| rng.gen_range(0.0..3.0f64).floor() + rng.gen_range(0.1..0.9));
            vec![check(vec![f, pts], |g, v| {
                let y = g.bilinear_sample_batched(v[0], v[1])?;
                weighted_sum(g, y, seed)
            })]
        }
        other => panic!("unknown op group `{}`", other),
    }
}

/// Worst relative error of a group over `SEEDS` instances, and whether all
/// passed without skipping any element.
pub fn op_group_summary(group: &str) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for seed in 0..SEEDS {
        for r in op_reports(group, seed) {
            worst = worst.max(r.max_rel_error);
            ok &= r.passed && r.skipped == 0 && r.checked > 0;
        }
    }
    (worst, ok)
}
