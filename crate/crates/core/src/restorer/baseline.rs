//! Classical comparison restorers: Gaussian smoothing and non-local means.

use ndarray::{Array2, ArrayRef2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, reflect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub gaussian_sigma: f64,
    pub nlm_patch: usize,
    pub nlm_search: usize,
    pub nlm_h: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            gaussian_sigma: 1.0,
            nlm_patch: 5,
            nlm_search: 11,
            nlm_h: 0.08,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) || !(self.nlm_h > 0.0) {
            return Err(Error::InvalidParam("gaussian_sigma and nlm_h must be positive".into()));
        }
        if self.nlm_patch % 2 == 0 || self.nlm_search % 2 == 0 || self.nlm_search < self.nlm_patch {
            return Err(Error::InvalidParam(format!(
                "nlm windows must be odd with search >= patch (patch {}, search {})",
                self.nlm_patch, self.nlm_search
            )));
        }
        Ok(())
    }
}

pub fn gaussian_baseline(slice: &ArrayRef2<f32>, sigma: f64) -> Result<Array2<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!("gaussian sigma must be positive, got {sigma}")));
    }
    Ok(filters::gaussian_blur(slice, sigma))
}

/// Non-local means on a reflect-padded plane.
///
/// The patch distance is the mean squared difference over the patch, so
/// `h` is in intensity units. The center pixel receives the largest weight
/// among the other search offsets (1 when the search window is a single
/// pixel).
pub fn nlm_baseline(slice: &ArrayRef2<f32>, p: &BaselineParams) -> Result<Array2<f32>> {
    p.validate()?;
    let (h, w) = slice.dim();
    let pr = (p.nlm_patch / 2) as isize;
    let sr = (p.nlm_search / 2) as isize;
    let pad = pr + sr;
    let (ph, pw) = (h + 2 * pad as usize, w + 2 * pad as usize);
    let padded = Array2::from_shape_fn((ph, pw), |(y, x)| {
        slice[[reflect(y as isize - pad, h), reflect(x as isize - pad, w)]] as f64
    });
    let inv_h2 = 1.0 / (p.nlm_h * p.nlm_h);
    let patch_area = (p.nlm_patch * p.nlm_patch) as f64;

    let mut num = Array2::<f64>::zeros((h, w));
    let mut den = Array2::<f64>::zeros((h, w));
    let mut w_max = Array2::<f64>::zeros((h, w));
    let mut any_other = false;

    // Patch-centre region in padded coordinates, widened by the patch radius.
    let (rh, rw) = (h + 2 * pr as usize, w + 2 * pr as usize);
    let base = sr;
    let mut diff = Array2::<f64>::zeros((rh, rw));
    for dy in -sr..=sr {
        for dx in -sr..=sr {
            if dy == 0 && dx == 0 {
                continue;
            }
            any_other = true;
            for y in 0..rh {
                for x in 0..rw {
                    let a = padded[[(base + y as isize) as usize, (base + x as isize) as usize]];
                    let b = padded[[(base + y as isize + dy) as usize, (base + x as isize + dx) as usize]];
                    diff[[y, x]] = (a - b) * (a - b);
                }
            }
            let dist = box_sum(&diff, p.nlm_patch);
            for y in 0..h {
                for x in 0..w {
                    let d = dist[[y, x]] / patch_area;
                    let wt = (-d * inv_h2).exp();
                    let v = padded[[(pad + y as isize + dy) as usize, (pad + x as isize + dx) as usize]];
                    num[[y, x]] += wt * v;
                    den[[y, x]] += wt;
                    if wt > w_max[[y, x]] {
                        w_max[[y, x]] = wt;
                    }
                }
            }
        }
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let ws = if any_other { w_max[[y, x]] } else { 1.0 };
        let v = slice[[y, x]] as f64;
        let d = den[[y, x]] + ws;
        // Underflowed weights leave only the center pixel.
        if d > 0.0 {
            ((num[[y, x]] + ws * v) / d) as f32
        } else {
            v as f32
        }
    }))
}

/// Sum over every `k x k` window of `a`; output is `(rows - k + 1, cols - k + 1)`.
fn box_sum(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (rh, rw) = a.dim();
    let (oh, ow) = (rh + 1 - k, rw + 1 - k);
    let mut rows = Array2::<f64>::zeros((rh, ow));
    for y in 0..rh {
        let mut acc: f64 = (0..k).map(|x| a[[y, x]]).sum();
        rows[[y, 0]] = acc;
        for x in 1..ow {
            acc += a[[y, x + k - 1]] - a[[y, x - 1]];
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for x in 0..ow {
        let mut acc: f64 = (0..k).map(|y| rows[[y, x]]).sum();
        out[[0, x]] = acc;
        for y in 1..oh {
            acc += rows[[y + k - 1, x]] - rows[[y - 1, x]];
            out[[y, x]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random_plane(h: usize, w: usize, seed: u64) -> Array2<f32> {
        let mut rng = SplitMix64::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.random::<f32>())
    }

    /// Direct NLM over an explicitly padded image.
    pub(crate) fn nlm_brute(img: &Array2<f32>, patch: usize, search: usize, hh: f64) -> Array2<f64> {
        let (h, w) = img.dim();
        let pr = (patch / 2) as isize;
        let sr = (search / 2) as isize;
        let pad = pr + sr;
        let at = |y: isize, x: isize| img[[reflect(y - pad, h), reflect(x - pad, w)]] as f64;
        let mut out = Array2::zeros((h, w));
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (cy, cx) = (y + pad, x + pad);
                let mut others = Vec::new();
                for dy in -sr..=sr {
                    for dx in -sr..=sr {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let mut d = 0.0;
                        for py in -pr..=pr {
                            for px in -pr..=pr {
                                let e = at(cy + py, cx + px) - at(cy + dy + py, cx + dx + px);
                                d += e * e;
                            }
                        }
                        d /= (patch * patch) as f64;
                        others.push(((-d / (hh * hh)).exp(), at(cy + dy, cx + dx)));
                    }
                }
                let ws = others.iter().map(|o| o.0).fold(0.0, f64::max);
                let ws = if others.is_empty() { 1.0 } else { ws };
                let num: f64 = others.iter().map(|o| o.0 * o.1).sum::<f64>() + ws * at(cy, cx);
                let den: f64 = others.iter().map(|o| o.0).sum::<f64>() + ws;
                out[[y as usize, x as usize]] = num / den;
            }
        }
        out
    }

    #[test]
    fn nlm_matches_brute_force() {
        for (seed, patch, search, hh) in [(1, 3, 5, 0.3), (2, 5, 11, 0.08), (3, 1, 3, 0.2), (4, 3, 3, 0.5)] {
            let img = random_plane(8, 8, seed);
            let p = BaselineParams { nlm_patch: patch, nlm_search: search, nlm_h: hh, ..Default::default() };
            let fast = nlm_baseline(&img, &p).unwrap();
            let slow = nlm_brute(&img, patch, search, hh);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn nlm_constant_is_unchanged() {
        let img = Array2::from_elem((12, 12), 0.37f32);
        let out = nlm_baseline(&img, &BaselineParams::default()).unwrap();
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-7));
    }

    #[test]
    fn nlm_huge_h_is_a_box_mean() {
        let img = random_plane(10, 10, 9);
        let p = BaselineParams { nlm_h: 1e6, nlm_patch: 3, nlm_search: 5, ..Default::default() };
        let out = nlm_baseline(&img, &p).unwrap();
        for y in 0..10isize {
            for x in 0..10isize {
                let mut s = 0.0f64;
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        s += img[[reflect(y + dy, 10), reflect(x + dx, 10)]] as f64;
                    }
                }
                assert!((out[[y as usize, x as usize]] as f64 - s / 25.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn nlm_rejects_even_or_inverted_windows() {
        let img = random_plane(8, 8, 1);
        for (patch, search) in [(4, 11), (5, 10), (7, 5)] {
            let p = BaselineParams { nlm_patch: patch, nlm_search: search, ..Default::default() };
            assert!(nlm_baseline(&img, &p).is_err());
        }
    }

    #[test]
    fn gaussian_constant_impulse_and_step() {
        let flat = Array2::from_elem((9, 9), 0.6f32);
        assert!(gaussian_baseline(&flat, 1.0).unwrap().iter().all(|&v| (v - 0.6).abs() < 1e-6));

        let mut imp = Array2::<f32>::zeros((9, 9));
        imp[[4, 4]] = 1.0;
        let out = gaussian_baseline(&imp, 1.0).unwrap();
        let g: Vec<f64> = (-3..=3).map(|x: i32| (-(x * x) as f64 / 2.0).exp()).collect();
        let z: f64 = g.iter().sum();
        for dy in -3..=3i32 {
            for dx in -3..=3i32 {
                let want = g[(dy + 3) as usize] * g[(dx + 3) as usize] / (z * z);
                let got = out[[(4 + dy) as usize, (4 + dx) as usize]] as f64;
                assert!((got - want).abs() < 1e-7);
            }
        }

        let step = Array2::from_shape_fn((8, 8), |(_, x)| if x < 4 { 0.2f32 } else { 0.8 });
        let out = gaussian_baseline(&step, 1.0).unwrap();
        for y in 0..8 {
            assert!(out[[y, 3]] > 0.2 && out[[y, 3]] < 0.8);
            assert!(out[[y, 4]] > 0.2 && out[[y, 4]] < 0.8);
        }
        assert!(gaussian_baseline(&step, 0.0).is_err());
    }

    #[test]
    fn baselines_are_shift_equivariant_in_the_interior() {
        let img = random_plane(24, 24, 5);
        let shifted = Array2::from_shape_fn((24, 24), |(y, x)| img[[(y + 2) % 24, (x + 3) % 24]]);
        let p = BaselineParams { nlm_patch: 3, nlm_search: 5, ..Default::default() };
        let a = nlm_baseline(&img, &p).unwrap();
        let b = nlm_baseline(&shifted, &p).unwrap();
        let ga = gaussian_baseline(&img, 1.0).unwrap();
        let gb = gaussian_baseline(&shifted, 1.0).unwrap();
        for y in 6..14 {
            for x in 6..14 {
                assert!((a[[y + 2, x + 3]] - b[[y, x]]).abs() < 1e-6);
                assert!((ga[[y + 2, x + 3]] - gb[[y, x]]).abs() < 1e-6);
            }
        }
    }
}
