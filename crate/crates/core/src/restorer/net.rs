//! The 2.5D convolutional restorer: a ReLU trunk of 3x3 reflect-padded
//! convolutions followed by one 3x3 convolution producing the raw `r`, `m`,
//! and `u` head planes.
//!
//! Convolutions run as im2col followed by a single GEMM, which makes the
//! reverse pass a pair of GEMMs plus a scatter-add per layer.

use std::fmt::{Debug, Display};

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::reflect;
use crate::stream::{self, domain};

/// Structural bound on the applied edit `|m * r|`.
pub const R_MAX: f64 = 0.2;

pub const HEAD_NAMES: [&str; 3] = ["r", "m", "u"];

/// Scalar type the network runs in. `f32` is the production type; `f64`
/// exists for finite-difference checks.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Send + Sync + Debug + Display + Default + 'static
{
    /// Largest value of `Self` not above `v`.
    fn floor_from_f64(v: f64) -> Self;

    /// `clamp(x + a, 0, 1)` where the result never lands farther from `x`
    /// than `|a|`.
    fn compose_px(x: Self, a: Self) -> Self;
}

impl Real for f32 {
    fn floor_from_f64(v: f64) -> f32 {
        let c = v as f32;
        if c as f64 > v {
            c.next_down()
        } else {
            c
        }
    }

    fn compose_px(x: f32, a: f32) -> f32 {
        let mut s = x + a;
        // Both operands are exact in f64, so the overshoot test is exact.
        if ((s as f64) - (x as f64)).abs() > (a as f64).abs() {
            s = if s > x { s.next_down() } else { s.next_up() };
        }
        s.clamp(0.0, 1.0)
    }
}

impl Real for f64 {
    fn floor_from_f64(v: f64) -> f64 {
        v
    }

    fn compose_px(x: f64, a: f64) -> f64 {
        (x + a).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Trunk widths, starting with the 3 input slices.
    pub trunk_channels: Vec<usize>,
    pub kernel_size: usize,
    pub activation: String,
    pub padding: String,
    pub heads: Vec<String>,
    pub r_max: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::with_trunk(vec![3, 16, 32, 32, 16])
    }
}

impl Architecture {
    pub fn with_trunk(trunk_channels: Vec<usize>) -> Self {
        Architecture {
            trunk_channels,
            kernel_size: 3,
            activation: "relu".into(),
            padding: "reflect".into(),
            heads: HEAD_NAMES.iter().map(|s| s.to_string()).collect(),
            r_max: R_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.trunk_channels;
        if c.len() < 2 || c[0] != 3 || c.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "trunk channels {c:?} must start at 3 and have at least one nonzero layer"
            )));
        }
        if self.kernel_size != 3 || self.activation != "relu" || self.padding != "reflect" {
            return Err(Error::InvalidParam("only 3x3 reflect-padded relu convolutions are supported".into()));
        }
        if self.heads != HEAD_NAMES {
            return Err(Error::InvalidParam(format!("heads must be {HEAD_NAMES:?}")));
        }
        if !(self.r_max > 0.0 && self.r_max <= 1.0) {
            return Err(Error::InvalidParam("r_max must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// `(in, out)` channels per convolution; the last one is the head.
    pub fn convs(&self) -> Vec<(usize, usize)> {
        let c = &self.trunk_channels;
        let mut v: Vec<(usize, usize)> = c.windows(2).map(|w| (w[0], w[1])).collect();
        v.push((*c.last().expect("validated"), HEAD_NAMES.len()));
        v
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        let mut offset = 0;
        let convs = self.convs();
        let k2 = self.kernel_size * self.kernel_size;
        for (i, &(cin, cout)) in convs[..convs.len() - 1].iter().enumerate() {
            for (suffix, shape) in [("weight", vec![cout, cin, 3, 3]), ("bias", vec![cout])] {
                let len = shape.iter().product();
                out.push(TensorSpec { name: format!("trunk.{i}.{suffix}"), shape, offset, len });
                offset += len;
            }
        }
        let (cin, _) = *convs.last().expect("head");
        for h in HEAD_NAMES {
            let len = cin * k2;
            out.push(TensorSpec { name: format!("head_{h}.weight"), shape: vec![1, cin, 3, 3], offset, len });
            offset += len;
        }
        for h in HEAD_NAMES {
            out.push(TensorSpec { name: format!("head_{h}.bias"), shape: vec![1], offset, len: 1 });
            offset += 1;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|t| t.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All parameters in one flat vector. Convolution `i` owns a weight block
/// of shape `(out, in * 9)` followed by its bias; the head weights of `r`,
/// `m`, `u` are stored back to back so they form one `(3, in * 9)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    arch: Architecture,
    data: Vec<T>,
    /// `(weight_offset, bias_offset, in, out)` per convolution.
    convs: Vec<(usize, usize, usize, usize)>,
}

fn conv_offsets(arch: &Architecture) -> Vec<(usize, usize, usize, usize)> {
    let mut off = 0;
    let convs = arch.convs();
    let n = convs.len();
    let mut out = Vec::with_capacity(n);
    for (i, &(cin, cout)) in convs.iter().enumerate() {
        let w = off;
        off += cin * 9 * cout;
        // Each bias block directly follows its weights.
        out.push((w, off, cin, cout));
        if i + 1 < n {
            off += cout;
        }
    }
    out
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(ModelParams {
            convs: conv_offsets(&arch),
            data: vec![T::zero(); n],
            arch,
        })
    }

    pub fn from_flat(arch: Architecture, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, architecture needs {}",
                data.len(),
                p.data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        p.data = data;
        Ok(p)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<T> {
        self.data
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn n_convs(&self) -> usize {
        self.convs.len()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, T> {
        let (w, _, cin, cout) = self.convs[layer];
        ArrayView2::from_shape((cout, cin * 9), &self.data[w..w + cout * cin * 9]).expect("layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, T> {
        let (_, b, _, cout) = self.convs[layer];
        ArrayView1::from(&self.data[b..b + cout])
    }

    /// Flat range of the head weights and biases.
    pub fn head_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (w, b, cin, cout) = *self.convs.last().expect("head");
        (w..w + cin * 9 * cout, b..b + cout)
    }

    pub fn zero_heads(&mut self) {
        let (w, b) = self.head_ranges();
        self.data[w].fill(T::zero());
        self.data[b].fill(T::zero());
    }

    /// Zeroes only the `r` head, which makes the model the identity.
    pub fn zero_r_head(&mut self) {
        let (w, b) = self.head_ranges();
        let per = (w.end - w.start) / HEAD_NAMES.len();
        self.data[w.start..w.start + per].fill(T::zero());
        self.data[b.start] = T::zero();
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().expect("finite")).expect("cast")).collect(),
            convs: self.convs.clone(),
        }
    }

    pub fn r_max(&self) -> T {
        T::floor_from_f64(self.arch.r_max)
    }
}

/// He-uniform trunk weights from the keyed init stream, zero biases, and
/// zero heads, so the fresh model is the identity restorer.
pub fn init_params(arch: Architecture, seed: u64) -> Result<ModelParams<f32>> {
    let mut p = ModelParams::<f32>::zeros(arch)?;
    for layer in 0..p.n_convs() - 1 {
        let (w, _, cin, cout) = p.convs[layer];
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        let mut rng = stream::rng(stream::key(&[domain::INIT, seed, layer as u64]));
        for v in &mut p.data[w..w + cin * 9 * cout] {
            *v = (bound * (2.0 * rng.random::<f64>() - 1.0)) as f32;
        }
    }
    Ok(p)
}

/// Reflect-padded 3x3 neighbourhood of every pixel: entry `k * n + p` is
/// the flat source index of tap `k = ky * 3 + kx` for output pixel `p`.
#[derive(Debug, Clone)]
pub struct Gather {
    idx: Vec<u32>,
    n: usize,
}

impl Gather {
    pub fn new(h: usize, w: usize) -> Self {
        let n = h * w;
        let mut idx = vec![0u32; 9 * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let k = ky * 3 + kx;
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    for x in 0..w {
                        let sx = reflect(x as isize + kx as isize - 1, w);
                        idx[k * n + y * w + x] = (sy * w + sx) as u32;
                    }
                }
            }
        }
        Gather { idx, n }
    }

    /// `(c, n) -> (c * 9, n)`.
    pub fn im2col<T: Real>(&self, act: &Array2<T>) -> Array2<T> {
        let (c, n) = act.dim();
        debug_assert_eq!(n, self.n);
        let mut cols = Array2::<T>::zeros((c * 9, n));
        let src = act.as_slice().expect("contiguous");
        let dst = cols.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            let row = &src[ci * n..(ci + 1) * n];
            for k in 0..9 {
                let out = &mut dst[(ci * 9 + k) * n..(ci * 9 + k + 1) * n];
                let idx = &self.idx[k * n..(k + 1) * n];
                for (o, &i) in out.iter_mut().zip(idx) {
                    *o = row[i as usize];
                }
            }
        }
        cols
    }

    /// Adjoint of [`Gather::im2col`]: `(c * 9, n) -> (c, n)`.
    pub fn col2im<T: Real>(&self, cols: &Array2<T>) -> Array2<T> {
        let (c9, n) = cols.dim();
        let c = c9 / 9;
        let mut act = Array2::<T>::zeros((c, n));
        let src = cols.as_slice().expect("contiguous");
        let dst = act.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            let row = &mut dst[ci * n..(ci + 1) * n];
            for k in 0..9 {
                let g = &src[(ci * 9 + k) * n..(ci * 9 + k + 1) * n];
                let idx = &self.idx[k * n..(k + 1) * n];
                for (&v, &i) in g.iter().zip(idx) {
                    row[i as usize] = row[i as usize] + v;
                }
            }
        }
        act
    }
}

/// Intermediate values kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Cache<T: Real> {
    gather: Gather,
    cols: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl<T: Real> Cache<T> {
    /// Trunk pre-activations, one `(channels, h * w)` array per layer.
    pub fn pre_activations(&self) -> &[Array2<T>] {
        &self.pre
    }
}

/// Raw head planes, `(3, h * w)` in `r, m, u` row order.
#[derive(Debug, Clone)]
pub struct Heads<T: Real> {
    pub raw: Array2<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> ModelParams<T> {
    fn check_input(&self, input: &ArrayView3<T>) -> Result<()> {
        let (c, h, w) = input.dim();
        if c != 3 || h < 2 || w < 2 {
            return Err(Error::Shape(format!("network input must be 3 planes of at least 2x2, got {c}x{h}x{w}")));
        }
        Ok(())
    }

    fn run(&self, input: ArrayView3<T>, keep: bool) -> Result<(Heads<T>, Option<Cache<T>>)> {
        self.check_input(&input)?;
        let (_, h, w) = input.dim();
        let gather = Gather::new(h, w);
        let mut act = input.to_owned().into_shape_with_order((3, h * w)).expect("contiguous");
        let mut cols_kept = Vec::new();
        let mut pre_kept = Vec::new();
        let last = self.n_convs() - 1;
        for layer in 0..=last {
            let cols = gather.im2col(&act);
            let mut z = self.weight(layer).dot(&cols);
            for (mut row, &b) in z.outer_iter_mut().zip(self.bias(layer).iter()) {
                row.mapv_inplace(|v| v + b);
            }
            if keep {
                cols_kept.push(cols);
            }
            if layer == last {
                act = z;
            } else {
                act = z.mapv(|v| if v > T::zero() { v } else { T::zero() });
                if keep {
                    pre_kept.push(z);
                }
            }
        }
        let heads = Heads { raw: act, height: h, width: w };
        let cache = keep.then(|| Cache { gather, cols: cols_kept, pre: pre_kept });
        Ok((heads, cache))
    }

    pub fn heads(&self, input: ArrayView3<T>) -> Result<Heads<T>> {
        Ok(self.run(input, false)?.0)
    }

    pub fn heads_cached(&self, input: ArrayView3<T>) -> Result<(Heads<T>, Cache<T>)> {
        let (h, c) = self.run(input, true)?;
        Ok((h, c.expect("kept")))
    }

    /// Gradient of a scalar objective with respect to every parameter,
    /// given its gradient `d_heads` with respect to the raw head planes.
    /// Accumulates into `grad` (flat, same layout as the parameters).
    pub fn backward(&self, cache: &Cache<T>, d_heads: &Array2<T>, grad: &mut [T]) {
        assert_eq!(grad.len(), self.data.len());
        let last = self.n_convs() - 1;
        let mut dz = d_heads.clone();
        for layer in (0..=last).rev() {
            let (wo, bo, cin, cout) = self.convs[layer];
            let cols = &cache.cols[layer];
            let dw = dz.dot(&cols.t());
            for (g, v) in grad[wo..wo + cout * cin * 9].iter_mut().zip(dw.iter()) {
                *g = *g + *v;
            }
            for (c, row) in dz.outer_iter().enumerate() {
                grad[bo + c] = grad[bo + c] + row.sum();
            }
            if layer == 0 {
                break;
            }
            let dcols = self.weight(layer).t().dot(&dz);
            let mut dact = cache.gather.col2im(&dcols);
            let pre = &cache.pre[layer - 1];
            dact.zip_mut_with(pre, |d, &z| {
                if z <= T::zero() {
                    *d = T::zero();
                }
            });
            dz = dact;
        }
    }
}

#[inline]
pub fn logistic<T: Real>(h: T) -> T {
    if h >= T::zero() {
        T::one() / (T::one() + (-h).exp())
    } else {
        let e = h.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(h: T) -> T {
    h.max(T::zero()) + (-h.abs()).exp().ln_1p()
}

/// Per-pixel outputs of the bounded restorer for one center slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorationOutput<T: Real = f32> {
    pub residual: Array2<T>,
    pub edit_map: Array2<T>,
    pub uncertainty: Array2<T>,
    pub restored: Array2<T>,
    pub applied_edit: Array2<T>,
}

impl<T: Real> Heads<T> {
    pub fn plane(&self, i: usize) -> ArrayView2<'_, T> {
        self.raw
            .slice(s![i, ..])
            .into_shape_with_order((self.height, self.width))
            .expect("contiguous")
    }

    /// Apply the head nonlinearities and compose with the center slice.
    pub fn output(&self, center: ArrayView2<T>, r_max: T) -> RestorationOutput<T> {
        let residual = self.plane(0).mapv(|h| r_max * h.tanh());
        let edit_map = self.plane(1).mapv(logistic);
        let uncertainty = self.plane(2).mapv(softplus);
        let applied_edit = &edit_map * &residual;
        let mut restored = center.to_owned();
        restored.zip_mut_with(&applied_edit, |x, &a| *x = T::compose_px(*x, a));
        RestorationOutput { residual, edit_map, uncertainty, restored, applied_edit }
    }
}

/// `clamp(x_c + m * r, 0, 1)` element-wise.
pub fn compose(x_c: ArrayView2<f32>, r: ArrayView2<f32>, m: ArrayView2<f32>) -> Result<Array2<f32>> {
    if x_c.dim() != r.dim() || x_c.dim() != m.dim() {
        return Err(Error::Shape(format!(
            "compose shapes differ: {:?} {:?} {:?}",
            x_c.dim(),
            r.dim(),
            m.dim()
        )));
    }
    let mut out = x_c.to_owned();
    ndarray::Zip::from(&mut out).and(&r).and(&m).for_each(|x, &r, &m| *x = f32::compose_px(*x, m * r));
    Ok(out)
}

pub fn forward_stack<T: Real>(params: &ModelParams<T>, input: ArrayView3<T>) -> Result<RestorationOutput<T>> {
    let heads = params.heads(input.view())?;
    Ok(heads.output(input.slice(s![1, .., ..]), params.r_max()))
}

pub fn forward(t: &crate::volume::SliceTriplet, params: &ModelParams<f32>) -> Result<RestorationOutput<f32>> {
    let stack: Array3<f32> = t.stacked();
    forward_stack(params, stack.view())
}
