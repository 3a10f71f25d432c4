//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are judged on an absolute scale.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
    /// Leave out elements whose ±h stencil crosses a relu/abs kink or a
    /// bilinear cell edge; there the central difference does not estimate
    /// the derivative. Skipped elements are counted in the report.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-3,
            floor: 1e-3,
            max_per_input: None,
            seed: 0,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementError {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ElementError>,
    pub checked: usize,
    /// Elements left out because their stencil crossed a kink.
    pub skipped: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `f` builds a scalar from leaves bound to `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        inputs,
        &GradCheckOptions {
            h,
            tol,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    let base = g.kink_pattern();
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    drop(g);

    // leaves require grad so that the kink pattern is recorded; no backward runs
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, bool)> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&g, &vars)?;
        let smooth = !opts.skip_kinks || g.kink_pattern() == base;
        Ok((g.value(out).item(), smooth))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst: Option<ElementError> = None;
    let mut checked = 0;
    let mut skipped = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elements: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for e in elements {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + opts.h;
            let (fp, sp) = eval(&work)?;
            work[i].data_mut()[e] = orig - opts.h;
            let (fm, sm) = eval(&work)?;
            work[i].data_mut()[e] = orig;
            if !(sp && sm) {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[i].data()[e];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            checked += 1;
            if worst.as_ref().map_or(true, |w| rel > w.rel_error) {
                worst = Some(ElementError {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        checked,
        skipped,
        tol: opts.tol,
        passed: max_rel_error <= opts.tol,
    })
}
