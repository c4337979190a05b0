//! Planar filtering primitives shared by the degradation stages and the
//! classical baselines.

use ndarray::{Array2, ArrayRef2};

/// Below this sigma a Gaussian blur is the identity.
pub const GAUSSIAN_IDENTITY_SIGMA: f64 = 0.05;

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Sampled Gaussian truncated at `ceil(3 sigma)` and renormalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(plane: &ArrayRef2<f32>, sigma: f64) -> Array2<f32> {
    if !(sigma >= GAUSSIAN_IDENTITY_SIGMA) {
        return plane.to_owned();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = plane.dim();
    let mut rows = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, &t) in kernel.iter().enumerate() {
                acc += t * plane[[y, reflect(x as isize + k as isize - radius, w)]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, &t) in kernel.iter().enumerate() {
                acc += t * rows[[reflect(y as isize + k as isize - radius, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Reflect,
    Zero,
}

/// Direct 2D correlation with an odd-sized kernel centered on each pixel.
pub fn convolve2d(plane: &ArrayRef2<f32>, kernel: &ArrayRef2<f32>, padding: Padding) -> Array2<f32> {
    let (h, w) = plane.dim();
    let (kh, kw) = kernel.dim();
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let taps: Vec<(isize, isize, f32)> = kernel
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((ky, kx), &v)| (ky as isize - ry, kx as isize - rx, v))
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0f32;
        for &(dy, dx, v) in &taps {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            let sample = match padding {
                Padding::Reflect => plane[[reflect(sy, h), reflect(sx, w)]],
                Padding::Zero => {
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    plane[[sy as usize, sx as usize]]
                }
            };
            acc += v * sample;
        }
        acc
    })
}

/// Line segment of `length` samples through the kernel center at `angle`
/// (radians, counter-clockwise from +x), splatted bilinearly onto a square
/// grid and normalized to sum 1. A length of 1 is the identity kernel.
pub fn line_kernel(length: usize, angle: f64) -> Array2<f32> {
    let length = length.max(1);
    let half = (length - 1) as f64 / 2.0;
    let size = 2 * (half.ceil() as usize) + 1;
    let c = (size / 2) as f64;
    let mut acc = Array2::<f64>::zeros((size, size));
    let (dx, dy) = (angle.cos(), -angle.sin());
    for i in 0..length {
        let t = i as f64 - half;
        let (px, py) = (c + t * dx, c + t * dy);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (oy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + oy as isize, x0 as isize + ox as isize);
                let wgt = wy * wx;
                if wgt > 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                    acc[[yy as usize, xx as usize]] += wgt;
                }
            }
        }
    }
    let total: f64 = acc.sum();
    acc.mapv(|v| (v / total) as f32)
}

/// Sobel gradient magnitude with reflect padding.
pub fn sobel_magnitude(plane: &ArrayRef2<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    let at = |y: isize, x: isize| plane[[reflect(y, h), reflect(x, w)]];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of the samples.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = (pos - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * f
}
