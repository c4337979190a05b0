//! Image-quality and conservatism measures.
//!
//! All reductions run in f64. Per-case values are computed on the center
//! slice of each evaluated triplet and then combined across slices.

use ndarray::{Array2, ArrayRef, ArrayRef2, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::reflect;
use crate::volume::same_shape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    /// Minimum absolute change (exclusive) for a meaningful edit.
    pub tau_edit: f64,
    /// A case is iatrogenic when its target gain is below `-tau_iat`.
    pub tau_iat: f64,
    pub psnr_cap: f64,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            tau_edit: 0.02,
            tau_iat: 0.01,
            psnr_cap: 100.0,
            ssim_window: 7,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.tau_edit, self.tau_iat, self.psnr_cap, self.ssim_k1, self.ssim_k2]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !ok || self.ssim_window == 0 || self.ssim_window % 2 == 0 {
            return Err(Error::InvalidParam(format!("invalid metric thresholds {self:?}")));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        self.ssim_k1 * self.ssim_k1
    }

    pub fn c2(&self) -> f64 {
        self.ssim_k2 * self.ssim_k2
    }
}

pub fn mse<D: Dimension>(a: &ArrayRef<f32, D>, b: &ArrayRef<f32, D>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let mut s = 0.0f64;
    Zip::from(a).and(b).for_each(|&x, &y| s += (x as f64 - y as f64).powi(2));
    Ok(s / a.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` for peak 1; identical inputs return `cap`.
pub fn psnr<D: Dimension>(a: &ArrayRef<f32, D>, b: &ArrayRef<f32, D>, cap: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { cap } else { -10.0 * m.log10() })
}

/// Sums of every `k x k` reflect-padded window centred on each pixel.
fn window_sums(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let r = (k / 2) as isize;
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dx in -r..=r {
                s += a[[y, reflect(x as isize + dx, w)]];
            }
            rows[[y, x]] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                s += rows[[reflect(y as isize + dy, h), x]];
            }
            out[[y, x]] = s;
        }
    }
    out
}

/// Local SSIM with a uniform window, reflect padding, and population
/// (co)variances.
pub fn ssim_map(a: &ArrayRef2<f32>, b: &ArrayRef2<f32>, t: &MetricThresholds) -> Result<Array2<f64>> {
    same_shape(a, b, "ssim")?;
    let (h, w) = a.dim();
    let k = t.ssim_window;
    if k > h || k > w {
        return Err(Error::Shape(format!("ssim window {k} does not fit a {h}x{w} image")));
    }
    let fa = a.mapv(|v| v as f64);
    let fb = b.mapv(|v| v as f64);
    let n = (k * k) as f64;
    let sa = window_sums(&fa, k);
    let sb = window_sums(&fb, k);
    let saa = window_sums(&(&fa * &fa), k);
    let sbb = window_sums(&(&fb * &fb), k);
    let sab = window_sums(&(&fa * &fb), k);
    let (c1, c2) = (t.c1(), t.c2());
    let mut out = Array2::<f64>::zeros((h, w));
    Zip::from(&mut out)
        .and(&sa)
        .and(&sb)
        .and(&saa)
        .and(&sbb)
        .and(&sab)
        .for_each(|o, &sa, &sb, &saa, &sbb, &sab| {
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            *o = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    Ok(out)
}

pub fn ssim_masked(a: &ArrayRef2<f32>, b: &ArrayRef2<f32>, mask: &ArrayRef2<bool>, t: &MetricThresholds) -> Result<f64> {
    same_shape(a, mask, "ssim mask")?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask("ssim region has no pixels".into()));
    }
    let map = ssim_map(a, b, t)?;
    let mut s = 0.0;
    Zip::from(&map).and(mask).for_each(|&v, &m| {
        if m {
            s += v
        }
    });
    Ok(s / count as f64)
}

/// Masked-SSIM improvement toward `clean` of `restored` over `degraded`.
pub fn target_gain(
    restored: &ArrayRef2<f32>,
    degraded: &ArrayRef2<f32>,
    clean: &ArrayRef2<f32>,
    target: &ArrayRef2<bool>,
    t: &MetricThresholds,
) -> Result<f64> {
    same_shape(restored, degraded, "target gain")?;
    Ok(ssim_masked(restored, clean, target, t)? - ssim_masked(degraded, clean, target, t)?)
}

pub fn meaningful_edit_mask<D: Dimension>(
    restored: &ArrayRef<f32, D>,
    input: &ArrayRef<f32, D>,
    tau_edit: f64,
) -> Result<ndarray::Array<bool, D>> {
    same_shape(restored, input, "edit mask")?;
    let mut out = ndarray::Array::from_elem(restored.raw_dim(), false);
    Zip::from(&mut out)
        .and(restored)
        .and(input)
        .for_each(|o, &r, &i| *o = (r as f64 - i as f64).abs() > tau_edit);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub max_abs: f64,
    pub fraction: f64,
    pub count: usize,
}

pub fn modification_footprint<D: Dimension>(
    restored: &ArrayRef<f32, D>,
    input: &ArrayRef<f32, D>,
    tau_edit: f64,
) -> Result<Footprint> {
    same_shape(restored, input, "footprint")?;
    let mut max_abs = 0.0f64;
    let mut count = 0usize;
    Zip::from(restored).and(input).for_each(|&r, &i| {
        let d = (r as f64 - i as f64).abs();
        max_abs = max_abs.max(d);
        count += (d > tau_edit) as usize;
    });
    Ok(Footprint { max_abs, fraction: count as f64 / restored.len().max(1) as f64, count })
}

/// `|edits ∩ region|`, the integer numerator of a segmentation share.
pub fn segmentation_count<D: Dimension>(edits: &ArrayRef<bool, D>, region: &ArrayRef<bool, D>) -> Result<usize> {
    same_shape(edits, region, "segmentation share")?;
    Ok(crate::volume::intersection_count(edits, region))
}

pub fn segmentation_share<D: Dimension>(
    edits: &ArrayRef<bool, D>,
    region: &ArrayRef<bool, D>,
    image_pixels: usize,
) -> Result<f64> {
    if image_pixels == 0 {
        return Err(Error::InvalidParam("image_pixels must be positive".into()));
    }
    Ok(segmentation_count(edits, region)? as f64 / image_pixels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub psnr_db: f64,
    pub target_gain: f64,
    pub footprint_max: f64,
    pub footprint_fraction: f64,
    pub meaningful_edit_count: usize,
    pub iatrogenic: bool,
}

/// One evaluated slice: restored output, the degraded input it came from,
/// the clean reference, and the target region.
pub struct SliceEval<'a> {
    pub restored: &'a ArrayRef2<f32>,
    pub degraded: &'a ArrayRef2<f32>,
    pub clean: &'a ArrayRef2<f32>,
    pub target: &'a ArrayRef2<bool>,
}

/// PSNR, target gain, and footprint fraction are means over slices; the
/// footprint maximum is the maximum over slices and edit counts add up.
/// Slices with an empty target do not contribute to the gain.
pub fn case_metrics(slices: &[SliceEval<'_>], t: &MetricThresholds) -> Result<CaseMetrics> {
    if slices.is_empty() {
        return Err(Error::InvalidParam("no slices to evaluate".into()));
    }
    let n = slices.len() as f64;
    let (mut psnr_sum, mut frac_sum, mut max_abs, mut count) = (0.0, 0.0, 0.0f64, 0usize);
    let mut gains = Vec::new();
    for s in slices {
        psnr_sum += psnr(s.restored, s.clean, t.psnr_cap)?;
        let fp = modification_footprint(s.restored, s.degraded, t.tau_edit)?;
        frac_sum += fp.fraction;
        max_abs = max_abs.max(fp.max_abs);
        count += fp.count;
        if s.target.iter().any(|&b| b) {
            gains.push(target_gain(s.restored, s.degraded, s.clean, s.target, t)?);
        }
    }
    if gains.is_empty() {
        return Err(Error::EmptyMask("target region is empty on every evaluated slice".into()));
    }
    let target_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    Ok(CaseMetrics {
        psnr_db: psnr_sum / n,
        target_gain,
        footprint_max: max_abs,
        footprint_fraction: frac_sum / n,
        meaningful_edit_count: count,
        iatrogenic: target_gain < -t.tau_iat,
    })
}
