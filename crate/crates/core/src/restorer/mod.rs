//! The residual-bounded restorer and the classical baselines it is compared
//! against.

pub mod baseline;
pub mod checkpoint;
pub mod net;

pub use baseline::{gaussian_baseline, nlm_baseline, BaselineParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, sha256_hex, Checkpoint};
pub use net::{compose, forward, forward_stack, init_params, Architecture, ModelParams, RestorationOutput, R_MAX};

use ndarray::{Array2, Array3, Axis};

use crate::error::Result;
use crate::exec::Exec;
use crate::volume::{slice_triplet, Volume};

/// Every slice of a volume restored from its own triplet, plus the maps.
#[derive(Debug, Clone)]
pub struct VolumeRestoration {
    pub restored: Volume,
    pub residual: Array3<f32>,
    pub edit_map: Array3<f32>,
    pub uncertainty: Array3<f32>,
    pub applied_edit: Array3<f32>,
}

fn stack(planes: Vec<Array2<f32>>) -> Array3<f32> {
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal plane shapes")
}

pub fn restore_volume(params: &ModelParams<f32>, v: &Volume, exec: Exec) -> Result<VolumeRestoration> {
    let outs = exec.try_map(v.depth(), |z| forward(&slice_triplet(v, z)?, params))?;
    let mut r = Vec::new();
    let mut m = Vec::new();
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut a = Vec::new();
    for o in outs {
        r.push(o.residual);
        m.push(o.edit_map);
        u.push(o.uncertainty);
        y.push(o.restored);
        a.push(o.applied_edit);
    }
    Ok(VolumeRestoration {
        restored: Volume::new(stack(y))?.with_spacing(v.spacing()),
        residual: stack(r),
        edit_map: stack(m),
        uncertainty: stack(u),
        applied_edit: stack(a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::SliceTriplet;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn plane(rng: &mut SplitMix64, h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_simple_fn((h, w), || rng.random::<f32>())
    }

    fn triplet(seed: u64, h: usize, w: usize) -> SliceTriplet {
        let mut rng = SplitMix64::seed_from_u64(seed);
        SliceTriplet::new(plane(&mut rng, h, w), plane(&mut rng, h, w), plane(&mut rng, h, w), 1).unwrap()
    }

    #[test]
    fn default_architecture_has_expected_parameter_count() {
        let arch = Architecture::default();
        // 448 + 4640 + 9248 + 4624 trunk, 3 * (16 * 9 + 1) heads.
        assert_eq!(arch.param_count(), 18960 + 435);
        let layout = arch.layout();
        let last = layout.last().unwrap();
        assert_eq!(last.offset + last.len, arch.param_count());
        assert_eq!(layout.iter().find(|t| t.name == "head_r.weight").unwrap().shape, vec![1, 16, 3, 3]);
    }

    #[test]
    fn fresh_model_is_the_identity() {
        let p = init_params(Architecture::default(), 11).unwrap();
        let t = triplet(2, 16, 12);
        let out = forward(&t, &p).unwrap();
        assert_eq!(out.restored, t.center);
        assert!(out.residual.iter().all(|&v| v == 0.0));
        assert!(out.edit_map.iter().all(|&v| v == 0.5));
        assert!(out.uncertainty.iter().all(|&v| (v - std::f32::consts::LN_2).abs() < 1e-7));
    }

    #[test]
    fn zero_r_head_is_identity_regardless_of_other_weights() {
        let mut p = init_params(Architecture::default(), 4).unwrap();
        let mut rng = SplitMix64::seed_from_u64(8);
        for v in p.flat_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        p.zero_r_head();
        let t = triplet(3, 10, 10);
        assert_eq!(forward(&t, &p).unwrap().restored, t.center);
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let mut p = init_params(Architecture::default(), 5).unwrap();
        let mut rng = SplitMix64::seed_from_u64(6);
        let (w, b) = p.head_ranges();
        for i in w.chain(b) {
            p.flat_mut()[i] = rng.random_range(-3.0..3.0);
        }
        let t = triplet(7, 20, 20);
        let a = forward(&t, &p).unwrap();
        let b = forward(&t, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.restored.iter().zip(t.center.iter()).all(|(y, x)| (y - x).abs() as f64 <= R_MAX));
        assert!(a.applied_edit.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn compose_examples() {
        let one = |v: f32| Array2::from_elem((1, 1), v);
        let y = compose(one(0.5).view(), one(0.1).view(), one(0.5).view()).unwrap();
        assert!((y[[0, 0]] - 0.55).abs() < 1e-7);
        let y = compose(one(0.95).view(), one(0.2).view(), one(1.0).view()).unwrap();
        assert_eq!(y[[0, 0]], 1.0);
        let y = compose(one(0.3).view(), one(0.2).view(), one(0.0).view()).unwrap();
        assert_eq!(y[[0, 0]], 0.3);
        assert!(compose(one(0.3).view(), Array2::zeros((2, 1)).view(), one(0.0).view()).is_err());
    }

    #[test]
    fn backward_matches_gemm_adjoint_of_im2col() {
        // <im2col(a), c> == <a, col2im(c)> for random a, c.
        let g = net::Gather::new(5, 7);
        let mut rng = SplitMix64::seed_from_u64(1);
        let a = Array2::from_shape_simple_fn((2, 35), || rng.random::<f64>());
        let c = Array2::from_shape_simple_fn((18, 35), || rng.random::<f64>());
        let lhs: f64 = (&g.im2col(&a) * &c).sum();
        let rhs: f64 = (&a * &g.col2im(&c)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn restore_volume_parallel_matches_serial() {
        let mut p = init_params(Architecture::default(), 2).unwrap();
        let (w, _) = p.head_ranges();
        let mut rng = SplitMix64::seed_from_u64(3);
        for i in w {
            p.flat_mut()[i] = rng.random_range(-0.5..0.5);
        }
        let mut vr = SplitMix64::seed_from_u64(4);
        let v = Volume::new(Array3::from_shape_simple_fn((4, 12, 12), || vr.random::<f32>())).unwrap();
        let a = restore_volume(&p, &v, Exec::Serial).unwrap();
        let b = restore_volume(&p, &v, Exec::Parallel).unwrap();
        assert_eq!(a.restored, b.restored);
        assert_eq!(a.applied_edit, b.applied_edit);
        let t = slice_triplet(&v, 2).unwrap();
        assert_eq!(forward(&t, &p).unwrap().restored, a.restored.slice(2));
    }
}
