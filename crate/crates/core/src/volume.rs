//! Volumes, slice triplets, region label maps, and the header+raw file pair.
//!
//! A volume file is `<name>.json` (shape and dtype) next to `<name>.raw`
//! (little-endian samples in z, y, x row-major order). Intensities are
//! normalized to `[0, 1]`; loaders clamp anything outside that range and
//! report how many samples they touched.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_PLANE: usize = 8;

const ORDER: &str = "zyx-row-major";

/// Clamps every sample to `[0, 1]` in place and returns how many changed.
pub fn clamp_unit<D: Dimension>(a: &mut ndarray::Array<f32, D>) -> usize {
    let mut n = 0;
    a.mapv_inplace(|v| {
        let c = v.clamp(0.0, 1.0);
        if c != v {
            n += 1;
        }
        c
    });
    n
}

/// Axial stack of normalized intensities, shape `(depth, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    voxels: Array3<f32>,
    spacing: Option<[f64; 3]>,
}

impl Volume {
    /// Wraps voxels that already satisfy the volume invariants.
    pub fn new(voxels: Array3<f32>) -> Result<Self> {
        check_shape(voxels.dim())?;
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParam(
                "volume intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Volume {
            voxels: voxels.as_standard_layout().into_owned(),
            spacing: None,
        })
    }

    /// Clamps out-of-range samples instead of rejecting them. Non-finite
    /// samples are still an error.
    pub fn from_unclamped(mut voxels: Array3<f32>) -> Result<(Self, usize)> {
        check_shape(voxels.dim())?;
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let clamped = clamp_unit(&mut voxels);
        Ok((Volume::new(voxels)?, clamped))
    }

    pub fn filled(depth: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Volume::new(Array3::from_elem((depth, height, width), value))
    }

    pub fn from_slices(slices: &[Array2<f32>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("volume needs at least one slice".into()))?;
        let (h, w) = first.dim();
        let mut voxels = Array3::zeros((slices.len(), h, w));
        for (z, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "slice {z} is {:?}, expected {:?}",
                    s.dim(),
                    (h, w)
                )));
            }
            voxels.index_axis_mut(Axis(0), z).assign(s);
        }
        Volume::new(voxels)
    }

    pub fn with_spacing(mut self, spacing: Option<[f64; 3]>) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn height(&self) -> usize {
        self.voxels.dim().1
    }

    pub fn width(&self) -> usize {
        self.voxels.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Array3<f32> {
        self.voxels
    }

    pub fn slice(&self, index: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(Axis(0), index)
    }
}

fn check_shape((d, h, w): (usize, usize, usize)) -> Result<()> {
    if d < 1 || h < MIN_PLANE || w < MIN_PLANE {
        return Err(Error::Shape(format!(
            "volume {d}x{h}x{w} below the minimum 1x{MIN_PLANE}x{MIN_PLANE}"
        )));
    }
    Ok(())
}

/// The previous, center, and next axial slices around `center_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplet {
    pub prev: Array2<f32>,
    pub center: Array2<f32>,
    pub next: Array2<f32>,
    pub center_index: usize,
}

impl SliceTriplet {
    pub fn new(
        prev: Array2<f32>,
        center: Array2<f32>,
        next: Array2<f32>,
        center_index: usize,
    ) -> Result<Self> {
        if prev.dim() != center.dim() || next.dim() != center.dim() {
            return Err(Error::Shape(format!(
                "triplet planes {:?}/{:?}/{:?} differ",
                prev.dim(),
                center.dim(),
                next.dim()
            )));
        }
        Ok(SliceTriplet {
            prev,
            center,
            next,
            center_index,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.center.dim()
    }

    /// Channel-first stack `(3, h, w)` in prev, center, next order.
    pub fn stacked(&self) -> Array3<f32> {
        let (h, w) = self.dim();
        let mut x = Array3::zeros((3, h, w));
        x.index_axis_mut(Axis(0), 0).assign(&self.prev);
        x.index_axis_mut(Axis(0), 1).assign(&self.center);
        x.index_axis_mut(Axis(0), 2).assign(&self.next);
        x
    }
}

/// Indices of the (prev, center, next) slices. Missing neighbors at the
/// volume ends fall back to the center slice.
pub fn triplet_indices(depth: usize, index: usize) -> Result<[usize; 3]> {
    if index >= depth {
        return Err(Error::OutOfRange { index, len: depth });
    }
    let prev = index.checked_sub(1).unwrap_or(index);
    let next = if index + 1 < depth { index + 1 } else { index };
    Ok([prev, index, next])
}

pub fn slice_triplet(v: &Volume, index: usize) -> Result<SliceTriplet> {
    let [p, c, n] = triplet_indices(v.depth(), index)?;
    SliceTriplet::new(
        v.slice(p).to_owned(),
        v.slice(c).to_owned(),
        v.slice(n).to_owned(),
        index,
    )
}

/// Anatomical region codes carried by a [`LabelMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Region {
    Background = 0,
    Skull = 1,
    Brain = 2,
    Vessel = 3,
    Aneurysm = 4,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Background,
        Region::Skull,
        Region::Brain,
        Region::Vessel,
        Region::Aneurysm,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Region> {
        Region::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "background",
            Region::Skull => "skull",
            Region::Brain => "brain",
            Region::Vessel => "vessel",
            Region::Aneurysm => "aneurysm",
        }
    }
}

/// Per-voxel region codes with the same shape as the paired volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Array3<u8>,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>) -> Result<Self> {
        check_shape(labels.dim())?;
        if let Some(bad) = labels.iter().find(|&&c| Region::from_code(c).is_none()) {
            return Err(Error::InvalidParam(format!("unknown region code {bad}")));
        }
        Ok(LabelMap {
            labels: labels.as_standard_layout().into_owned(),
        })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn region_mask(&self, region: Region) -> Array3<bool> {
        self.labels.mapv(|c| c == region.code())
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&c| c == region.code()).count()
    }

    pub fn check_matches(&self, v: &Volume) -> Result<()> {
        if self.dim() != v.dim() {
            return Err(Error::Shape(format!(
                "labels {:?} do not match volume {:?}",
                self.dim(),
                v.dim()
            )));
        }
        Ok(())
    }
}

/// Header of the `.json` half of a volume file pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_count: Option<u64>,
}

/// Header and raw paths for `path`, which may name either half or the bare
/// stem.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s: OsString = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".raw"))
}

fn read_pair(path: &Path, dtype: &str, elem: usize) -> Result<(VolumeHeader, Vec<u8>)> {
    let (hp, rp) = file_pair(path);
    let text = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: VolumeHeader = serde_json::from_slice(&text).map_err(|e| Error::Header {
        path: hp.clone(),
        message: e.to_string(),
    })?;
    if header.dtype != dtype {
        return Err(Error::Header {
            path: hp,
            message: format!("dtype {:?}, expected {dtype:?}", header.dtype),
        });
    }
    if header.order != ORDER {
        return Err(Error::Header {
            path: hp,
            message: format!("order {:?}, expected {ORDER:?}", header.order),
        });
    }
    let raw = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let expected = header.depth * header.height * header.width;
    if raw.len() != expected * elem {
        return Err(Error::SizeMismatch {
            path: rp,
            expected,
            actual: raw.len(),
        });
    }
    Ok((header, raw))
}

fn write_pair(path: &Path, header: &VolumeHeader, raw: &[u8]) -> Result<()> {
    let (hp, rp) = file_pair(path);
    let mut text = serde_json::to_vec_pretty(header)?;
    text.push(b'\n');
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
    fs::write(&rp, raw).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

fn header_for(dim: (usize, usize, usize), dtype: &str, spacing: Option<[f64; 3]>) -> VolumeHeader {
    VolumeHeader {
        depth: dim.0,
        height: dim.1,
        width: dim.2,
        dtype: dtype.into(),
        order: ORDER.into(),
        spacing,
        clamp_count: None,
    }
}

/// Reads a volume file pair. Returns the volume and the number of samples
/// that had to be clamped into `[0, 1]`.
pub fn load_volume(path: &Path) -> Result<(Volume, usize)> {
    let (header, raw) = read_pair(path, "f32", 4)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec((header.depth, header.height, header.width), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (v, clamped) = Volume::from_unclamped(voxels)?;
    Ok((v.with_spacing(header.spacing), clamped))
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let header = header_for(v.dim(), "f32", v.spacing());
    let raw: Vec<u8> = v.voxels().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, &header, &raw)
}

/// Unbounded f32 maps (residuals, uncertainties) in the volume format.
pub fn save_array(a: &Array3<f32>, path: &Path) -> Result<()> {
    let header = header_for(a.dim(), "f32", None);
    let raw: Vec<u8> = a.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, &header, &raw)
}

pub fn load_array(path: &Path) -> Result<Array3<f32>> {
    let (header, raw) = read_pair(path, "f32", 4)?;
    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Array3::from_shape_vec((header.depth, header.height, header.width), values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let (header, raw) = read_pair(path, "u8", 1)?;
    let labels = Array3::from_shape_vec((header.depth, header.height, header.width), raw)
        .map_err(|e| Error::Shape(e.to_string()))?;
    LabelMap::new(labels)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let header = header_for(labels.dim(), "u8", None);
    let raw: Vec<u8> = labels.labels().iter().copied().collect();
    write_pair(path, &header, &raw)
}

/// Boolean masks use the label format with codes 0 and 1.
pub fn save_mask(mask: &Array3<bool>, path: &Path) -> Result<()> {
    let header = header_for(mask.dim(), "u8", None);
    let raw: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
    write_pair(path, &header, &raw)
}

pub fn load_mask(path: &Path) -> Result<Array3<bool>> {
    let (header, raw) = read_pair(path, "u8", 1)?;
    if raw.iter().any(|&b| b > 1) {
        return Err(Error::Header {
            path: path.to_path_buf(),
            message: "mask values must be 0 or 1".into(),
        });
    }
    let mask = Array3::from_shape_vec(
        (header.depth, header.height, header.width),
        raw.into_iter().map(|b| b == 1).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(mask)
}

/// Element-wise check that two arrays have the same shape.
pub fn same_shape<A, B, D: Dimension>(
    a: &ndarray::ArrayRef<A, D>,
    b: &ndarray::ArrayRef<B, D>,
    what: &str,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Number of voxels where both masks are set.
pub fn intersection_count<D: Dimension>(
    a: &ndarray::ArrayRef<bool, D>,
    b: &ndarray::ArrayRef<bool, D>,
) -> usize {
    let mut n = 0;
    Zip::from(a).and(b).for_each(|&x, &y| n += (x && y) as usize);
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(d: usize, h: usize, w: usize) -> Volume {
        let n = (d * h * w) as f32;
        Volume::new(Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            ((z * h * w + y * w + x) as f32) / n
        }))
        .unwrap()
    }

    #[test]
    fn constant_file_loads_constant_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        save_volume(&Volume::filled(16, 64, 64, 0.5).unwrap(), &p).unwrap();
        let (v, clamped) = load_volume(&p).unwrap();
        assert_eq!(clamped, 0);
        assert_eq!(v.dim(), (16, 64, 64));
        assert!(v.voxels().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn short_raw_is_a_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short");
        let header = header_for((1, 64, 64), "f32", None);
        let raw = vec![0u8; 4095 * 4];
        write_pair(&p, &header, &raw).unwrap();
        match load_volume(&p) {
            Err(Error::SizeMismatch {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 4096);
                assert_eq!(actual, 4095 * 4);
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_sample_is_clamped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("neg");
        let mut values = vec![0.25f32; 8 * 8];
        values[10] = -0.25;
        let raw: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
        write_pair(&p, &header_for((1, 8, 8), "f32", None), &raw).unwrap();
        let (v, clamped) = load_volume(&p).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(v.voxels()[[0, 1, 2]], 0.0);
    }

    #[test]
    fn non_finite_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan");
        let mut values = vec![0.25f32; 8 * 8];
        values[3] = f32::NAN;
        let raw: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
        write_pair(&p, &header_for((1, 8, 8), "f32", None), &raw).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonFinite { index: 3 })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume(&dir.path().join("absent")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_twice_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp(3, 9, 10).with_spacing(Some([2.0, 1.0, 1.0]));
        save_volume(&v, &dir.path().join("a")).unwrap();
        save_volume(&v, &dir.path().join("b.json")).unwrap();
        for ext in ["json", "raw"] {
            let a = fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let b = fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unwritable_destination_errors() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let v = ramp(1, 8, 8);
        assert!(matches!(
            save_volume(&v, &blocker.join("sub").join("v")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn labels_and_masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels =
            LabelMap::new(Array3::from_shape_fn((2, 8, 8), |(z, y, x)| ((z + y + x) % 5) as u8))
                .unwrap();
        save_labels(&labels, &dir.path().join("l")).unwrap();
        assert_eq!(load_labels(&dir.path().join("l")).unwrap(), labels);
        let mask = labels.region_mask(Region::Vessel);
        save_mask(&mask, &dir.path().join("m")).unwrap();
        assert_eq!(load_mask(&dir.path().join("m")).unwrap(), mask);
        assert!(LabelMap::new(Array3::from_elem((1, 8, 8), 9)).is_err());
    }

    #[test]
    fn interior_triplet_uses_adjacent_slices() {
        let v = ramp(16, 8, 8);
        let t = slice_triplet(&v, 5).unwrap();
        assert_eq!(t.prev, v.slice(4));
        assert_eq!(t.center, v.slice(5));
        assert_eq!(t.next, v.slice(6));
        assert_eq!(t.center_index, 5);
    }

    #[test]
    fn boundary_triplets_replicate_center() {
        let v = ramp(16, 8, 8);
        let t = slice_triplet(&v, 0).unwrap();
        assert_eq!(t.prev, v.slice(0));
        assert_eq!(t.next, v.slice(1));
        let t = slice_triplet(&v, 15).unwrap();
        assert_eq!(t.prev, v.slice(14));
        assert_eq!(t.next, v.slice(15));
        assert!(matches!(
            slice_triplet(&v, 16),
            Err(Error::OutOfRange { index: 16, len: 16 })
        ));
    }

    #[test]
    fn too_small_volume_rejected() {
        assert!(Volume::filled(1, 7, 8, 0.0).is_err());
        assert!(Volume::filled(0, 8, 8, 0.0).is_err());
        assert!(Volume::new(Array3::from_elem((1, 8, 8), 1.5)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_is_bitwise_identity(
            d in 1usize..4, h in 8usize..12, w in 8usize..12, seed in any::<u64>()
        ) {
            let dir = tempfile::tempdir().unwrap();
            let voxels = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
                let k = crate::stream::key(&[seed, z as u64, y as u64, x as u64]);
                (k >> 40) as f32 / (1u64 << 24) as f32
            });
            let v = Volume::new(voxels).unwrap();
            save_volume(&v, &dir.path().join("v")).unwrap();
            let (back, clamped) = load_volume(&dir.path().join("v")).unwrap();
            prop_assert_eq!(clamped, 0);
            prop_assert!(back.voxels().iter().zip(v.voxels().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn triplet_planes_share_shape(d in 1usize..6, i in 0usize..6) {
            let v = ramp(d, 8, 9);
            match slice_triplet(&v, i) {
                Ok(t) => {
                    prop_assert!(i < d);
                    prop_assert_eq!(t.prev.dim(), (8, 9));
                    prop_assert_eq!(t.next.dim(), (8, 9));
                }
                Err(_) => prop_assert!(i >= d),
            }
        }
    }
}
