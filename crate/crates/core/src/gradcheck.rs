//! Central finite-difference verification of the analytic gradients.
//!
//! The fixture is a reduced `3 -> 4 -> heads` network on 8x8 inputs whose
//! parameters keep every non-smooth point of the objective (ReLU, clamp,
//! absolute values, sign of the applied edit) away from the perturbed
//! parameters, so central differences measure a smooth function.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::Result;
use crate::exec::Exec;
use crate::restorer::{Architecture, ModelParams};
use crate::training::{batch_loss, gradients, LossWeights, Sample};

pub const FD_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_params: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

pub fn check(p: &ModelParams<f64>, batch: &[Sample<f64>], w: &LossWeights, step: f64) -> Result<GradCheck> {
    let (_, analytic) = gradients(p, batch, w, Exec::Serial)?;
    let mut worst = GradCheck { max_relative_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, n_params: analytic.len() };
    let mut q = p.clone();
    for (i, &ga) in analytic.iter().enumerate() {
        let v = p.flat()[i];
        q.flat_mut()[i] = v + step;
        let plus = batch_loss(&q, batch, w)?.total;
        q.flat_mut()[i] = v - step;
        let minus = batch_loss(&q, batch, w)?.total;
        q.flat_mut()[i] = v;
        let gn = (plus - minus) / (2.0 * step);
        let e = relative_error(ga, gn);
        if e > worst.max_relative_error || i == 0 {
            worst = GradCheck { max_relative_error: e, worst_index: i, analytic: ga, numeric: gn, ..worst };
        }
    }
    Ok(worst)
}

/// Sign pattern of every kink in the objective.
fn kinks(p: &ModelParams<f64>, batch: &[Sample<f64>]) -> Result<Vec<i8>> {
    let sgn = |v: f64| -> i8 {
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    let mut out = Vec::new();
    for s in batch {
        let (heads, cache) = p.heads_cached(s.input.view())?;
        for pre in cache.pre_activations() {
            out.extend(pre.iter().map(|&v| sgn(v)));
        }
        let o = heads.output(s.center(), p.r_max());
        let (h, w) = o.edit_map.dim();
        for y in 0..h {
            for x in 0..w {
                let m = o.edit_map[[y, x]];
                if x + 1 < w {
                    out.push(sgn(o.edit_map[[y, x + 1]] - m));
                }
                if y + 1 < h {
                    out.push(sgn(o.edit_map[[y + 1, x]] - m));
                }
                let raw = s.center()[[y, x]] + o.applied_edit[[y, x]];
                out.push(sgn(raw) + sgn(1.0 - raw));
                out.push(sgn(o.applied_edit[[y, x]]));
                out.push(sgn(o.restored[[y, x]] - s.clean[[y, x]]));
            }
        }
    }
    Ok(out)
}

/// True when no kink changes sign anywhere in `[theta - step, theta + step]`
/// along any single coordinate (checked at both ends).
pub fn kink_free(p: &ModelParams<f64>, batch: &[Sample<f64>], step: f64) -> Result<bool> {
    let base = kinks(p, batch)?;
    if base.contains(&0) {
        return Ok(false);
    }
    let mut q = p.clone();
    for i in 0..p.param_count() {
        let v = p.flat()[i];
        for d in [-step, step] {
            q.flat_mut()[i] = v + d;
            if kinks(&q, batch)? != base {
                return Ok(false);
            }
        }
        q.flat_mut()[i] = v;
    }
    Ok(true)
}

fn fixture_candidate(seed: u64) -> Result<(ModelParams<f64>, Vec<Sample<f64>>)> {
    let arch = Architecture::with_trunk(vec![3, 4]);
    let mut p = ModelParams::<f64>::zeros(arch)?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);

    // Trunk: |w . x| <= 27 * 0.05 < 2 = |bias|, so no ReLU input nears 0.
    let trunk_w = 4 * 27;
    let biases = [2.0, 2.0, 2.0, -2.0];
    let heads_w = 4 * 9;
    let mut v = Vec::with_capacity(p.param_count());
    v.extend((0..trunk_w).map(|_| u(-0.05, 0.05)));
    v.extend(biases);
    v.extend((0..heads_w).map(|_| u(-0.01, 0.01)));
    v.extend((0..heads_w).map(|_| u(-0.1, 0.1)));
    v.extend((0..heads_w).map(|_| u(-0.1, 0.1)));
    // r bias keeps r > 0; m and u biases vary.
    v.push(1.5);
    v.push(u(-0.5, 0.5));
    v.push(u(-0.5, 0.5));
    p.flat_mut().copy_from_slice(&v);

    let mut batch = Vec::new();
    for k in 0..2 {
        let input = Array3::from_shape_simple_fn((3, 8, 8), || u(0.3, 0.7));
        let center = input.index_axis(ndarray::Axis(0), 1).to_owned();
        // Far target: |y_hat - y| >= 0.05 with the identity gate off. Near
        // target: y_hat - y >= 0.03 with the gate open.
        let clean = if k == 0 {
            center.mapv(|x| if u(0.0, 1.0) < 0.5 { x + 0.25 } else { x - 0.25 })
        } else {
            center.mapv(|x| x - 0.03)
        };
        batch.push(Sample { input, clean });
    }
    Ok((p, batch))
}

/// The first seed from `seed` onward whose fixture is kink-free at `step`.
pub fn fixture(seed: u64, step: f64) -> Result<(u64, ModelParams<f64>, Vec<Sample<f64>>)> {
    let mut s = seed;
    loop {
        let (p, batch) = fixture_candidate(s)?;
        if kink_free(&p, &batch, step)? {
            return Ok((s, p, batch));
        }
        s += 1;
    }
}

/// The combined objective followed by each term in isolation.
pub fn weight_cases() -> Vec<(&'static str, LossWeights)> {
    let w = LossWeights::default();
    let mut v = vec![("combined", w)];
    for (i, name) in crate::training::TERM_NAMES.iter().enumerate() {
        v.push((name, w.only(i)));
    }
    v
}
