//! Seeded synthetic degradation: blur, motion, Poisson–Gaussian noise,
//! ring/band artifacts, and edge streaks.
//!
//! A [`DegradationRecipe`] is the reproducibility unit. It is sampled from a
//! [`DegradeConfig`] and a seed, serializes to JSON without loss, and applies
//! slice by slice. Every random draw inside a stage comes from a stream keyed
//! by `(recipe seed, stage index, voxel or slice index)`, so the result does
//! not depend on traversal order.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayRef2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::filters::{self, Padding};
use crate::stream::{self, domain};
use crate::volume::{clamp_unit, triplet_indices, SliceTriplet, Volume};

pub const MAX_BLUR_LEVEL: u32 = 10;
pub const SIGMA_PER_BLUR_LEVEL: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactMode {
    Ring,
    Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    GaussianBlur {
        sigma: f64,
    },
    MotionBlur {
        length: usize,
        angle: f64,
    },
    PoissonGaussian {
        photons: f64,
        read_sigma: f64,
    },
    RingBand {
        amplitude: f64,
        radial_freq: f64,
        mode: ArtifactMode,
    },
    EdgeStreak {
        amplitude: f64,
        streak_len: usize,
        angle: f64,
    },
}

impl Stage {
    /// Position in the canonical stage order.
    pub fn rank(&self) -> usize {
        match self {
            Stage::GaussianBlur { .. } => 0,
            Stage::MotionBlur { .. } => 1,
            Stage::PoissonGaussian { .. } => 2,
            Stage::RingBand { .. } => 3,
            Stage::EdgeStreak { .. } => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GaussianBlur { .. } => "gaussian_blur",
            Stage::MotionBlur { .. } => "motion_blur",
            Stage::PoissonGaussian { .. } => "poisson_gaussian",
            Stage::RingBand { .. } => "ring_band",
            Stage::EdgeStreak { .. } => "edge_streak",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("{}: {m}", self.name())));
        match *self {
            Stage::GaussianBlur { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad("sigma must be finite and >= 0")
            }
            Stage::MotionBlur { length, angle } if length < 1 || length % 2 == 0 || !angle.is_finite() => {
                bad("length must be odd and >= 1")
            }
            Stage::PoissonGaussian { photons, read_sigma }
                if !(photons >= 1.0 && photons.is_finite()) || !(read_sigma >= 0.0 && read_sigma.is_finite()) =>
            {
                bad("photons must be >= 1 and read_sigma >= 0")
            }
            Stage::RingBand { amplitude, radial_freq, .. }
                if !(amplitude >= 0.0 && amplitude.is_finite()) || !radial_freq.is_finite() =>
            {
                bad("amplitude must be >= 0")
            }
            Stage::EdgeStreak { amplitude, streak_len, angle }
                if !(amplitude >= 0.0 && amplitude.is_finite()) || streak_len < 1 || !angle.is_finite() =>
            {
                bad("amplitude must be >= 0 and streak_len >= 1")
            }
            _ => Ok(()),
        }
    }
}

/// One sampled degradation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub stages: Vec<Stage>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_level: Option<u32>,
}

impl DegradationRecipe {
    pub fn identity(seed: u64) -> Self {
        DegradationRecipe {
            stages: Vec::new(),
            seed,
            blur_level: None,
        }
    }

    /// Checks parameter signs and the canonical blur, noise, ring/band,
    /// streak ordering.
    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            s.validate()?;
        }
        if self.stages.windows(2).any(|w| w[0].rank() > w[1].rank()) {
            return Err(Error::InvalidParam(
                "stages must follow blur, noise, ring/band, edge-streak order".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let r: DegradationRecipe = serde_json::from_slice(bytes)?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::InvalidParam(format!(
                "{what}: range [{}, {}] must be finite and ordered",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }

    /// Uniform draw over the odd integers in the range.
    fn draw_odd(&self, rng: &mut impl Rng) -> usize {
        let odds = self.odd_values();
        odds[rng.random_range(0..odds.len())]
    }

    fn odd_values(&self) -> Vec<usize> {
        let lo = self.lo.ceil().max(1.0) as usize;
        let hi = self.hi.floor().max(0.0) as usize;
        (lo..=hi).filter(|v| v % 2 == 1).collect()
    }
}

/// Independent inclusion probability per stage type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageProbabilities {
    pub gaussian_blur: f64,
    pub motion_blur: f64,
    pub noise: f64,
    pub ring_band: f64,
    pub edge_streak: f64,
}

impl Default for StageProbabilities {
    fn default() -> Self {
        StageProbabilities {
            gaussian_blur: 0.9,
            motion_blur: 0.3,
            noise: 0.9,
            ring_band: 0.4,
            edge_streak: 0.3,
        }
    }
}

impl StageProbabilities {
    pub fn all(p: f64) -> Self {
        StageProbabilities {
            gaussian_blur: p,
            motion_blur: p,
            noise: p,
            ring_band: p,
            edge_streak: p,
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [
            self.gaussian_blur,
            self.motion_blur,
            self.noise,
            self.ring_band,
            self.edge_streak,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageRanges {
    pub sigma: Interval,
    pub motion_length: Interval,
    pub motion_angle: Interval,
    pub photons: Interval,
    pub read_sigma: Interval,
    pub ring_amplitude: Interval,
    pub radial_freq: Interval,
    /// Probability that a ring/band stage uses band mode.
    pub band_probability: f64,
    pub streak_amplitude: Interval,
    pub streak_len: Interval,
    pub streak_angle: Interval,
}

impl Default for StageRanges {
    fn default() -> Self {
        StageRanges {
            sigma: Interval::new(0.5, 2.5),
            motion_length: Interval::new(3.0, 9.0),
            motion_angle: Interval::new(0.0, PI),
            photons: Interval::new(200.0, 2000.0),
            read_sigma: Interval::new(0.005, 0.02),
            ring_amplitude: Interval::new(0.005, 0.03),
            radial_freq: Interval::new(0.05, 0.25),
            band_probability: 0.5,
            streak_amplitude: Interval::new(0.02, 0.08),
            streak_len: Interval::new(3.0, 9.0),
            streak_angle: Interval::new(0.0, PI),
        }
    }
}

/// Sampler settings for [`sample_recipe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub probabilities: StageProbabilities,
    pub ranges: StageRanges,
    /// When non-empty, Gaussian blur draws a level from this table instead
    /// of a continuous sigma.
    pub blur_levels: Vec<u32>,
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        for p in self
            .probabilities
            .as_array()
            .into_iter()
            .chain([self.ranges.band_probability])
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!("probability {p} outside [0, 1]")));
            }
        }
        let r = &self.ranges;
        for (name, iv) in [
            ("sigma", r.sigma),
            ("motion_length", r.motion_length),
            ("motion_angle", r.motion_angle),
            ("photons", r.photons),
            ("read_sigma", r.read_sigma),
            ("ring_amplitude", r.ring_amplitude),
            ("radial_freq", r.radial_freq),
            ("streak_amplitude", r.streak_amplitude),
            ("streak_len", r.streak_len),
            ("streak_angle", r.streak_angle),
        ] {
            iv.check(name)?;
        }
        if r.sigma.lo < 0.0 || r.photons.lo < 1.0 || r.read_sigma.lo < 0.0 {
            return Err(Error::InvalidParam(
                "sigma >= 0, photons >= 1, read_sigma >= 0 required".into(),
            ));
        }
        if r.ring_amplitude.lo < 0.0 || r.streak_amplitude.lo < 0.0 || r.streak_len.lo < 1.0 {
            return Err(Error::InvalidParam("amplitudes >= 0 and streak_len >= 1 required".into()));
        }
        if r.motion_length.odd_values().is_empty() {
            return Err(Error::InvalidParam("motion_length range holds no odd length".into()));
        }
        for &level in &self.blur_levels {
            blur_level_to_sigma(level)?;
        }
        Ok(())
    }

    /// Checks that every parameter of `recipe` could have come from this
    /// sampler.
    pub fn admits(&self, recipe: &DegradationRecipe) -> Result<()> {
        recipe.validate()?;
        let r = &self.ranges;
        let outside = |s: &Stage| Err(Error::InvalidParam(format!("{} outside configured ranges", s.name())));
        for s in &recipe.stages {
            let ok = match *s {
                Stage::GaussianBlur { sigma } => match recipe.blur_level {
                    Some(level) => {
                        self.blur_levels.contains(&level) && blur_level_to_sigma(level)? == sigma
                    }
                    None => r.sigma.contains(sigma),
                },
                Stage::MotionBlur { length, angle } => {
                    r.motion_length.contains(length as f64) && r.motion_angle.contains(angle)
                }
                Stage::PoissonGaussian { photons, read_sigma } => {
                    r.photons.contains(photons) && r.read_sigma.contains(read_sigma)
                }
                Stage::RingBand { amplitude, radial_freq, .. } => {
                    r.ring_amplitude.contains(amplitude) && r.radial_freq.contains(radial_freq)
                }
                Stage::EdgeStreak { amplitude, streak_len, angle } => {
                    r.streak_amplitude.contains(amplitude)
                        && r.streak_len.contains(streak_len as f64)
                        && r.streak_angle.contains(angle)
                }
            };
            if !ok {
                return outside(s);
            }
        }
        Ok(())
    }
}

/// Linear blur-level scale: `sigma = 0.25 * level`, levels 0 through 10.
pub fn blur_level_to_sigma(level: u32) -> Result<f64> {
    if level > MAX_BLUR_LEVEL {
        return Err(Error::InvalidParam(format!(
            "blur level {level} outside 0..={MAX_BLUR_LEVEL}"
        )));
    }
    Ok(SIGMA_PER_BLUR_LEVEL * level as f64)
}

/// Draws one recipe. Each stage type is included independently with its
/// configured probability; its parameters come from a stream private to that
/// stage type, so toggling one stage never shifts another's draws.
pub fn sample_recipe(cfg: &DegradeConfig, seed: u64) -> Result<DegradationRecipe> {
    cfg.validate()?;
    let r = &cfg.ranges;
    let probs = cfg.probabilities.as_array();
    let mut recipe = DegradationRecipe::identity(seed);
    for (rank, &p) in probs.iter().enumerate() {
        let mut rng = stream::rng(stream::key(&[domain::RECIPE, seed, rank as u64]));
        if rng.random::<f64>() >= p {
            continue;
        }
        let stage = match rank {
            0 => {
                if cfg.blur_levels.is_empty() {
                    Stage::GaussianBlur {
                        sigma: r.sigma.draw(&mut rng),
                    }
                } else {
                    let level = cfg.blur_levels[rng.random_range(0..cfg.blur_levels.len())];
                    recipe.blur_level = Some(level);
                    Stage::GaussianBlur {
                        sigma: blur_level_to_sigma(level)?,
                    }
                }
            }
            1 => Stage::MotionBlur {
                length: r.motion_length.draw_odd(&mut rng),
                angle: r.motion_angle.draw(&mut rng),
            },
            2 => Stage::PoissonGaussian {
                photons: r.photons.draw(&mut rng),
                read_sigma: r.read_sigma.draw(&mut rng),
            },
            3 => {
                let amplitude = r.ring_amplitude.draw(&mut rng);
                let radial_freq = r.radial_freq.draw(&mut rng);
                let mode = if rng.random::<f64>() < r.band_probability {
                    ArtifactMode::Band
                } else {
                    ArtifactMode::Ring
                };
                Stage::RingBand {
                    amplitude,
                    radial_freq,
                    mode,
                }
            }
            _ => Stage::EdgeStreak {
                amplitude: r.streak_amplitude.draw(&mut rng),
                streak_len: r.streak_len.draw(&mut rng).round().max(1.0) as usize,
                angle: r.streak_angle.draw(&mut rng),
            },
        };
        recipe.stages.push(stage);
    }
    Ok(recipe)
}

pub fn apply_gaussian_blur(plane: &ArrayRef2<f32>, sigma: f64) -> Array2<f32> {
    filters::gaussian_blur(plane, sigma)
}

pub fn apply_motion_blur(plane: &ArrayRef2<f32>, length: usize, angle: f64) -> Array2<f32> {
    if length <= 1 {
        return plane.to_owned();
    }
    filters::convolve2d(plane, &filters::line_kernel(length, angle), Padding::Reflect)
}

/// `Poisson(x * photons) / photons + N(0, read_sigma^2)` per pixel, drawn
/// from the stream keyed by `(stream_key, first_voxel + pixel)`, then
/// clamped.
pub fn apply_poisson_gaussian(
    plane: &ArrayRef2<f32>,
    photons: f64,
    read_sigma: f64,
    stream_key: u64,
    first_voxel: u64,
) -> (Array2<f32>, usize) {
    let w = plane.dim().1;
    let mut out = Array2::from_shape_fn(plane.dim(), |(y, x)| {
        let voxel = first_voxel + (y * w + x) as u64;
        let mut rng = stream::rng(stream::key(&[stream_key, voxel]));
        let lambda = plane[[y, x]] as f64 * photons;
        let counts = if lambda > 0.0 {
            Poisson::new(lambda).map(|p| p.sample(&mut rng)).unwrap_or(lambda)
        } else {
            0.0
        };
        let read: f64 = if read_sigma > 0.0 {
            read_sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        (counts / photons + read) as f32
    });
    let clamped = clamp_unit(&mut out);
    (out, clamped)
}

/// Additive ring/band field. Ring mode is a concentric sinusoid around the
/// slice center; band mode adds one offset per row drawn uniformly from
/// `[-amplitude, amplitude]` using `stream_key`.
pub fn ring_band_field(
    dim: (usize, usize),
    amplitude: f64,
    radial_freq: f64,
    mode: ArtifactMode,
    stream_key: u64,
) -> Array2<f32> {
    let (h, w) = dim;
    match mode {
        ArtifactMode::Ring => {
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            Array2::from_shape_fn(dim, |(y, x)| {
                let rho = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                (amplitude * (2.0 * PI * radial_freq * rho).sin()) as f32
            })
        }
        ArtifactMode::Band => {
            let mut rng = stream::rng(stream_key);
            let offsets: Vec<f32> = (0..h)
                .map(|_| (amplitude * (2.0 * rng.random::<f64>() - 1.0)) as f32)
                .collect();
            Array2::from_shape_fn(dim, |(y, _)| offsets[y])
        }
    }
}

pub fn apply_ring_band(
    plane: &ArrayRef2<f32>,
    amplitude: f64,
    radial_freq: f64,
    mode: ArtifactMode,
    stream_key: u64,
) -> (Array2<f32>, usize) {
    if amplitude == 0.0 {
        return (plane.to_owned(), 0);
    }
    let mut out = plane.to_owned();
    out += &ring_band_field(plane.dim(), amplitude, radial_freq, mode, stream_key);
    let clamped = clamp_unit(&mut out);
    (out, clamped)
}

/// Pixels whose Sobel magnitude reaches the slice's own 95th percentile.
/// Ties at the threshold count as edges; zero-gradient pixels never do.
pub fn edge_map(plane: &ArrayRef2<f32>) -> Array2<bool> {
    let mag = filters::sobel_magnitude(plane);
    let thr = filters::percentile(mag.as_slice().expect("standard layout"), 95.0);
    mag.mapv(|m| m > 0.0 && m >= thr)
}

/// Edge map smeared along a 1-px line of `streak_len` at `angle`, scaled so
/// its maximum equals `amplitude`. Zero everywhere when the slice has no
/// edges.
pub fn edge_streak_field(plane: &ArrayRef2<f32>, amplitude: f64, streak_len: usize, angle: f64) -> Array2<f32> {
    let edges = edge_map(plane).mapv(|e| e as u8 as f32);
    let smeared = filters::convolve2d(&edges, &filters::line_kernel(streak_len, angle), Padding::Zero);
    let peak = smeared.iter().copied().fold(0.0f32, f32::max);
    if peak <= 0.0 {
        return Array2::zeros(plane.dim());
    }
    let scale = (amplitude / peak as f64) as f32;
    smeared.mapv(|v| v * scale)
}

pub fn apply_edge_streak(
    plane: &ArrayRef2<f32>,
    amplitude: f64,
    streak_len: usize,
    angle: f64,
) -> (Array2<f32>, usize) {
    if amplitude == 0.0 {
        return (plane.to_owned(), 0);
    }
    let mut out = plane.to_owned();
    out += &edge_streak_field(plane, amplitude, streak_len, angle);
    let clamped = clamp_unit(&mut out);
    (out, clamped)
}

/// Applies every stage of `recipe` to one slice. `slice_index` addresses the
/// random streams, so degrading a single slice matches the corresponding
/// slice of a whole-volume application. Returns per-stage clamp counts.
pub fn apply_recipe_slice(
    plane: &ArrayRef2<f32>,
    recipe: &DegradationRecipe,
    slice_index: usize,
) -> (Array2<f32>, Vec<usize>) {
    let (h, w) = plane.dim();
    let mut cur = plane.to_owned();
    let mut clamps = Vec::with_capacity(recipe.stages.len());
    for (si, stage) in recipe.stages.iter().enumerate() {
        let stage_key = stream::key(&[domain::STAGE, recipe.seed, si as u64]);
        let (mut next, mut n) = match *stage {
            Stage::GaussianBlur { sigma } => (apply_gaussian_blur(&cur, sigma), 0),
            Stage::MotionBlur { length, angle } => (apply_motion_blur(&cur, length, angle), 0),
            Stage::PoissonGaussian { photons, read_sigma } => apply_poisson_gaussian(
                &cur,
                photons,
                read_sigma,
                stage_key,
                (slice_index * h * w) as u64,
            ),
            Stage::RingBand {
                amplitude,
                radial_freq,
                mode,
            } => apply_ring_band(
                &cur,
                amplitude,
                radial_freq,
                mode,
                stream::key(&[stage_key, slice_index as u64]),
            ),
            Stage::EdgeStreak {
                amplitude,
                streak_len,
                angle,
            } => apply_edge_streak(&cur, amplitude, streak_len, angle),
        };
        n += clamp_unit(&mut next);
        clamps.push(n);
        cur = next;
    }
    (cur, clamps)
}

/// Whole-volume application with per-stage clamp totals.
pub fn apply_recipe_counted(v: &Volume, recipe: &DegradationRecipe, exec: Exec) -> (Volume, Vec<usize>) {
    let slices = exec.map(v.depth(), |z| apply_recipe_slice(&v.slice(z), recipe, z));
    let mut voxels = Array3::zeros(v.dim());
    let mut clamps = vec![0; recipe.stages.len()];
    for (z, (plane, counts)) in slices.into_iter().enumerate() {
        voxels.index_axis_mut(Axis(0), z).assign(&plane);
        for (total, c) in clamps.iter_mut().zip(counts) {
            *total += c;
        }
    }
    let out = Volume::new(voxels)
        .expect("clamped degradation output is a valid volume")
        .with_spacing(v.spacing());
    (out, clamps)
}

pub fn apply_recipe(v: &Volume, recipe: &DegradationRecipe) -> Volume {
    apply_recipe_counted(v, recipe, Exec::Serial).0
}

/// The triplet around `index` of the degraded volume, degrading only the
/// slices it needs. Equal to `slice_triplet(&apply_recipe(v, recipe), index)`.
pub fn degrade_triplet(v: &Volume, recipe: &DegradationRecipe, index: usize) -> Result<SliceTriplet> {
    let [p, c, n] = triplet_indices(v.depth(), index)?;
    let center = apply_recipe_slice(&v.slice(c), recipe, c).0;
    let side = |z: usize| {
        if z == c {
            center.clone()
        } else {
            apply_recipe_slice(&v.slice(z), recipe, z).0
        }
    };
    SliceTriplet::new(side(p), center.clone(), side(n), index)
}
