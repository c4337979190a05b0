//! Procedural head-like phantoms with exact region labels.
//!
//! Each case is an elliptical skull annulus around textured brain tissue,
//! crossed by thin quadratic Bézier vessels that drift slowly from slice to
//! slice, optionally carrying a small spherical bulge (the aneurysm) on one
//! vessel wall. Everything is a pure function of [`PhantomSpec`].

use ndarray::{Array2, Array3, ArrayRef2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::filters;
use crate::stream::{self, domain};
use crate::volume::{LabelMap, Region, Volume};

pub const BACKGROUND_LEVEL: f32 = 0.05;
pub const SKULL_LEVEL: f32 = 0.9;
pub const BRAIN_LEVEL: f32 = 0.35;
pub const VESSEL_LEVEL: f32 = 0.7;
pub const ANEURYSM_LEVEL: f32 = 0.75;

pub const DEFAULT_TARGET_RADIUS: usize = 2;

/// Smallest in-plane size that still fits a skull annulus around a brain
/// large enough for vessels.
pub const MIN_PHANTOM_PLANE: usize = 24;

/// Voxel spacing written into phantom volumes (z, y, x).
pub const PHANTOM_SPACING: [f64; 3] = [1.0, 1.0, 1.0];

const CURVE_SAMPLES: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub n_vessels: usize,
    pub aneurysm_probability: f64,
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 64,
            width: 64,
            depth: 16,
            n_vessels: 3,
            aneurysm_probability: 0.5,
            texture_amplitude: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_vessels < 1 {
            return Err(Error::InvalidParam("n_vessels must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.aneurysm_probability) {
            return Err(Error::InvalidParam("aneurysm_probability must lie in [0, 1]".into()));
        }
        if !(0.0..=0.1).contains(&self.texture_amplitude) {
            return Err(Error::InvalidParam("texture_amplitude must lie in [0, 0.1]".into()));
        }
        if self.depth < 1 || self.height.min(self.width) < MIN_PHANTOM_PLANE {
            return Err(Error::InvalidParam(format!(
                "phantom {}x{}x{} cannot fit a skull annulus (need depth >= 1, plane >= {MIN_PHANTOM_PLANE})",
                self.depth, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub seed: u64,
    pub clean: Volume,
    pub labels: LabelMap,
    /// Evaluation target: vessel and aneurysm labels dilated in-plane.
    pub target: Array3<bool>,
}

pub fn case_id(seed: u64) -> String {
    format!("ph-{seed:016x}")
}

#[derive(Debug, Clone, Copy)]
struct Point {
    y: f64,
    x: f64,
}

struct Vessel {
    control: [Point; 3],
    drift: [Point; 3],
    radius: f64,
}

struct Aneurysm {
    center: (f64, f64, f64),
    radius: f64,
}

struct Head {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    thickness: f64,
}

impl Head {
    fn shrink(&self, z: usize, depth: usize) -> f64 {
        let t = if depth > 1 {
            z as f64 / (depth - 1) as f64
        } else {
            0.5
        };
        (1.0 - 0.35 * (2.0 * t - 1.0).powi(2)).sqrt()
    }

    /// Outer and inner semi-axes `(ay, ax)` at slice `z`.
    fn axes(&self, z: usize, depth: usize) -> ((f64, f64), (f64, f64)) {
        let s = self.shrink(z, depth);
        let outer = (self.ay * s, self.ax * s);
        (outer, (outer.0 - self.thickness, outer.1 - self.thickness))
    }
}

fn inside(dy: f64, dx: f64, (ay, ax): (f64, f64)) -> bool {
    (dy / ay).powi(2) + (dx / ax).powi(2) <= 1.0
}

fn bezier(c: &[Point; 3], t: f64) -> Point {
    let u = 1.0 - t;
    Point {
        y: u * u * c[0].y + 2.0 * u * t * c[1].y + t * t * c[2].y,
        x: u * u * c[0].x + 2.0 * u * t * c[1].x + t * t * c[2].x,
    }
}

fn bezier_tangent(c: &[Point; 3], t: f64) -> Point {
    Point {
        y: 2.0 * (1.0 - t) * (c[1].y - c[0].y) + 2.0 * t * (c[2].y - c[1].y),
        x: 2.0 * (1.0 - t) * (c[1].x - c[0].x) + 2.0 * t * (c[2].x - c[1].x),
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vy, vx) = (b.y - a.y, b.x - a.x);
    let len2 = vy * vy + vx * vx;
    let t = if len2 > 0.0 {
        (((p.y - a.y) * vy + (p.x - a.x) * vx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.y - a.y - t * vy).powi(2) + (p.x - a.x - t * vx).powi(2)).sqrt()
}

impl Vessel {
    /// Control points in pixel coordinates at slice `z`. Normalized brain
    /// coordinates are kept within 0.85 of the inner ellipse.
    fn control_at(&self, head: &Head, z: usize, depth: usize) -> [Point; 3] {
        let zc = (depth as f64 - 1.0) / 2.0;
        let (_, inner) = head.axes(z, depth);
        let mut out = [Point { y: 0.0, x: 0.0 }; 3];
        for i in 0..3 {
            let mut u = self.control[i].y + self.drift[i].y * (z as f64 - zc);
            let mut w = self.control[i].x + self.drift[i].x * (z as f64 - zc);
            let r = (u * u + w * w).sqrt();
            if r > 0.85 {
                u *= 0.85 / r;
                w *= 0.85 / r;
            }
            out[i] = Point {
                y: head.cy + u * inner.0,
                x: head.cx + w * inner.1,
            };
        }
        out
    }
}

/// Uniform point in the disc of radius `r` (normalized coordinates).
fn disc_point(rng: &mut impl Rng, r: f64) -> Point {
    let rho = r * rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    Point {
        y: rho * theta.sin(),
        x: rho * theta.cos(),
    }
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    half * (2.0 * rng.random::<f64>() - 1.0)
}

/// Smoothed white noise scaled to peak `amplitude`.
fn texture(seed: u64, z: usize, dim: (usize, usize), amplitude: f64) -> Array2<f32> {
    if amplitude == 0.0 {
        return Array2::zeros(dim);
    }
    let mut rng = stream::rng(stream::key(&[domain::TEXTURE, seed, z as u64]));
    let noise = Array2::from_shape_simple_fn(dim, || (2.0 * rng.random::<f64>() - 1.0) as f32);
    let smooth = filters::gaussian_blur(&noise, 1.5);
    let peak = smooth.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return smooth;
    }
    let scale = (amplitude / peak as f64) as f32;
    smooth.mapv(|v| v * scale)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let (d, h, w) = (spec.depth, spec.height, spec.width);
    let mut rng = stream::rng(stream::key(&[domain::PHANTOM, spec.seed]));

    let head = Head {
        cy: (h as f64 - 1.0) / 2.0 + symmetric(&mut rng, 1.5),
        cx: (w as f64 - 1.0) / 2.0 + symmetric(&mut rng, 1.5),
        ay: 0.44 * h as f64 * rng.random_range(0.92..1.0),
        ax: 0.40 * w as f64 * rng.random_range(0.92..1.0),
        thickness: rng.random_range(2.5..3.5),
    };
    let vessels: Vec<Vessel> = (0..spec.n_vessels)
        .map(|_| Vessel {
            control: [
                disc_point(&mut rng, 0.8),
                disc_point(&mut rng, 0.8),
                disc_point(&mut rng, 0.8),
            ],
            drift: [
                Point { y: symmetric(&mut rng, 0.015), x: symmetric(&mut rng, 0.015) },
                Point { y: symmetric(&mut rng, 0.015), x: symmetric(&mut rng, 0.015) },
                Point { y: symmetric(&mut rng, 0.015), x: symmetric(&mut rng, 0.015) },
            ],
            radius: rng.random_range(1.0..2.0),
        })
        .collect();

    let has_aneurysm = rng.random::<f64>() < spec.aneurysm_probability;
    let aneurysm = has_aneurysm.then(|| {
        let t0 = rng.random_range(0.3..0.7);
        let zc = (rng.random_range(0.3..0.7) * (d as f64 - 1.0)).round();
        let radius = rng.random_range(2.0..3.0);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let v = &vessels[0];
        let c = v.control_at(&head, zc as usize, d);
        let p = bezier(&c, t0);
        let tan = bezier_tangent(&c, t0);
        let norm = (tan.y * tan.y + tan.x * tan.x).sqrt().max(1e-9);
        let (ny, nx) = (-tan.x / norm * side, tan.y / norm * side);
        Aneurysm {
            center: (zc, p.y + ny * v.radius, p.x + nx * v.radius),
            radius,
        }
    });

    let mut voxels = Array3::<f32>::zeros((d, h, w));
    let mut labels = Array3::<u8>::zeros((d, h, w));
    for z in 0..d {
        let (outer, inner) = head.axes(z, d);
        let tex = texture(spec.seed, z, (h, w), spec.texture_amplitude);
        let mut lab = labels.index_axis_mut(Axis(0), z);
        for ((y, x), l) in lab.indexed_iter_mut() {
            let (dy, dx) = (y as f64 - head.cy, x as f64 - head.cx);
            *l = if inside(dy, dx, inner) {
                Region::Brain.code()
            } else if inside(dy, dx, outer) {
                Region::Skull.code()
            } else {
                Region::Background.code()
            };
        }
        for v in &vessels {
            let c = v.control_at(&head, z, d);
            let pts: Vec<Point> = (0..=CURVE_SAMPLES)
                .map(|i| bezier(&c, i as f64 / CURVE_SAMPLES as f64))
                .collect();
            let pad = v.radius + 1.0;
            let y0 = (pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - pad).floor().max(0.0) as usize;
            let y1 = (pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + pad).ceil().min(h as f64 - 1.0) as usize;
            let x0 = (pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - pad).floor().max(0.0) as usize;
            let x1 = (pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + pad).ceil().min(w as f64 - 1.0) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if lab[[y, x]] != Region::Brain.code() {
                        continue;
                    }
                    let p = Point { y: y as f64, x: x as f64 };
                    let near = pts.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= v.radius);
                    if near {
                        lab[[y, x]] = Region::Vessel.code();
                    }
                }
            }
        }
        if let Some(a) = &aneurysm {
            let dz = z as f64 - a.center.0;
            if dz.abs() <= a.radius {
                let r2 = a.radius * a.radius - dz * dz;
                for ((y, x), l) in lab.indexed_iter_mut() {
                    let d2 = (y as f64 - a.center.1).powi(2) + (x as f64 - a.center.2).powi(2);
                    if d2 <= r2 && (*l == Region::Brain.code() || *l == Region::Vessel.code()) {
                        *l = Region::Aneurysm.code();
                    }
                }
            }
        }
        let mut plane = voxels.index_axis_mut(Axis(0), z);
        for ((y, x), px) in plane.indexed_iter_mut() {
            *px = match Region::from_code(lab[[y, x]]).expect("valid code") {
                Region::Background => BACKGROUND_LEVEL,
                Region::Skull => SKULL_LEVEL,
                Region::Brain => (BRAIN_LEVEL + tex[[y, x]]).clamp(0.0, 1.0),
                Region::Vessel => VESSEL_LEVEL,
                Region::Aneurysm => ANEURYSM_LEVEL,
            };
        }
    }

    let labels = LabelMap::new(labels)?;
    let target = target_mask_from_labels(&labels, DEFAULT_TARGET_RADIUS);
    Ok(PhantomCase {
        case_id: case_id(spec.seed),
        seed: spec.seed,
        clean: Volume::new(voxels)?.with_spacing(Some(PHANTOM_SPACING)),
        labels,
        target,
    })
}

/// Dilation of a planar mask by the disc `dy^2 + dx^2 <= radius^2`, clipped
/// to the plane.
pub fn dilate_disc(mask: &ArrayRef2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.to_owned();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for &(dy, dx) in &offsets {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                out[[yy as usize, xx as usize]] = true;
            }
        }
    }
    out
}

/// Vessel and aneurysm labels, dilated slice by slice.
pub fn target_mask_from_labels(labels: &LabelMap, radius: usize) -> Array3<bool> {
    let vessels = labels
        .labels()
        .mapv(|c| c == Region::Vessel.code() || c == Region::Aneurysm.code());
    let mut out = Array3::from_elem(vessels.dim(), false);
    for (z, plane) in vessels.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), z).assign(&dilate_disc(&plane, radius));
    }
    out
}

pub fn target_mask(case: &PhantomCase, radius: usize) -> Array3<bool> {
    target_mask_from_labels(&case.labels, radius)
}

/// Case `i` uses seed `spec.seed ^ i`, independent of scheduling.
pub fn generate_corpus(spec: &PhantomSpec, count: usize, exec: Exec) -> Result<Vec<PhantomCase>> {
    spec.validate()?;
    exec.try_map(count, |i| generate_phantom(&spec.with_seed(spec.seed ^ i as u64)))
}
